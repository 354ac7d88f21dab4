"""Shared data model: volumes, masks, configurations and task presets."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MODALITIES = ("T1w", "T1c", "T2w", "FLAIR", "DWI", "ADC")
TASKS = ("WMH", "ISLES", "BraTS")
TUMOR_CLASSES = ("WT", "TC", "ET")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(RuntimeError):
    """Missing or malformed input data."""


class NumericError(ArithmeticError):
    """Non-finite values during optimization."""


@dataclass
class Volume:
    data: np.ndarray  # [M, D, H, W] float32
    spacing: tuple  # (dz, dy, dx) mm
    modality_names: list
    subject_id: str = ""
    affine: Optional[np.ndarray] = None  # voxel-to-world, kept for writing outputs

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.modality_names = list(self.modality_names)
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be 4-D [M,D,H,W], got {self.data.shape}")
        if self.data.shape[0] != len(self.modality_names):
            raise ValueError("modality count does not match data channels")
        unknown = [m for m in self.modality_names if m not in MODALITIES]
        if unknown:
            raise ValueError(f"unknown modality names: {unknown}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape[1:]


@dataclass
class Mask:
    data: np.ndarray  # [K, D, H, W] uint8 in {0,1}
    class_names: list = field(default_factory=lambda: ["lesion"])

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(np.uint8)
        self.class_names = list(self.class_names)
        if self.data.ndim != 4 or self.data.shape[0] != len(self.class_names):
            raise ValueError("mask must be [K,D,H,W] with one channel per class name")
        if self.data.max(initial=0) > 1:
            raise ValueError("mask values must be binary")

    @property
    def shape(self):
        return self.data.shape[1:]

    def is_nested(self) -> bool:
        """ET <= TC <= WT voxelwise; trivially true for single-class masks."""
        if self.data.shape[0] < 2:
            return True
        return bool(np.all(self.data[1:] <= self.data[:-1]))


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class ModelConfig:
    num_streams: int = 2
    stage_channels: tuple = (16, 32, 64, 128, 256)
    swin_layers: int = 1
    swin_heads: int = 4
    swin_window: int = 7
    cbam_reduction: int = 8
    num_classes: int = 1
    input_size: tuple = (208, 208)
    cross_heads: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))

    @classmethod
    def full_scale(cls, **kw):
        return cls(stage_channels=(32, 64, 128, 256, 512), **kw)


@dataclass(frozen=True)
class LossConfig:
    mode: str = "vascular"
    eps: float = 1.0
    gamma: float = 2.0
    alpha_t: float = 0.25
    alpha: float = 0.3
    beta: float = 0.7
    w_f: float = 0.5
    w_t: float = 0.5
    aux_weights: tuple = (0.5, 0.25)
    lambda_b: float = 0.5
    lambda_lesion: float = 0.25
    distance_mode: str = "unsigned_outside"
    distance_cap: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "aux_weights", tuple(float(w) for w in self.aux_weights))


@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.0
    affine_prob: float = 0.0
    rotation_deg: float = 0.0
    scale_frac: float = 0.0
    elastic_prob: float = 0.0
    # per-sample probability is drawn uniformly from this range
    photometric_prob: tuple = (0.0, 0.0)
    channel_dropout_prob: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "photometric_prob", tuple(float(p) for p in self.photometric_prob))


@dataclass(frozen=True)
class SamplerConfig:
    enabled: bool = True
    size_percentile: float = 25.0
    oversample_factor: float = 3.0


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    epochs: int = 150
    batch_size: int = 18
    weight_decay: float = 1.5e-4
    warmup_epochs: int = 15
    seed: int = 0
    grad_clip: Optional[float] = 1.0


@dataclass(frozen=True)
class TaskProfile:
    name: str
    modalities: tuple
    loss_config: LossConfig
    augmentation_tier: AugmentationConfig
    sampler: Optional[SamplerConfig]
    optimizer: OptimizerConfig

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))

    @property
    def class_names(self):
        return list(TUMOR_CLASSES) if self.loss_config.mode == "brats" else ["lesion"]


AUGMENTATION_PRESETS = {
    "WMH": AugmentationConfig(0.5, 0.75, 20.0, 0.20, 0.5, (0.3, 0.5), 0.5),
    "ISLES": AugmentationConfig(0.5, 0.75, 15.0, 0.15, 0.3, (0.3, 0.3), 0.25),
    "BraTS": AugmentationConfig(0.5, 0.50, 10.0, 0.10, 0.0, (0.15, 0.20), 0.0),
}

OPTIMIZER_PRESETS = {
    "WMH": OptimizerConfig(lr=1e-4, epochs=150, batch_size=18, weight_decay=1.5e-4),
    "ISLES": OptimizerConfig(lr=1e-4, epochs=120, batch_size=18, weight_decay=1.5e-4),
    "BraTS": OptimizerConfig(lr=5e-5, epochs=300, batch_size=8, weight_decay=1e-4),
}

MODALITY_PRESETS = {
    "WMH": ("FLAIR", "T1w"),
    "ISLES": ("DWI", "ADC"),
    "BraTS": ("T1w", "T1c", "T2w", "FLAIR"),
}


def task_profile(name: str) -> TaskProfile:
    """Preset profile for one of the three benchmark tasks."""
    if name not in TASKS:
        raise ConfigError(f"unknown task {name!r}; expected one of {TASKS}")
    brats = name == "BraTS"
    return TaskProfile(
        name=name,
        modalities=MODALITY_PRESETS[name],
        loss_config=LossConfig(mode="brats" if brats else "vascular"),
        augmentation_tier=AUGMENTATION_PRESETS[name],
        # difficulty-aware sampling is used for the vascular tasks only
        sampler=None if brats else SamplerConfig(),
        optimizer=OPTIMIZER_PRESETS[name],
    )


def model_config_for(profile: TaskProfile, **overrides) -> ModelConfig:
    kw = dict(num_streams=len(profile.modalities), num_classes=len(profile.class_names))
    kw.update(overrides)
    return ModelConfig(**kw)


def validate_config(cfg: ModelConfig, profile: TaskProfile) -> list:
    """Return a list of human-readable violations; empty when consistent."""
    out = []
    if cfg.num_streams < 1:
        out.append("num_streams must be >= 1")
    if len(profile.modalities) != cfg.num_streams:
        out.append("stream/modality mismatch")
    unknown = [m for m in profile.modalities if m not in MODALITIES]
    if unknown:
        out.append(f"unknown modalities: {unknown}")
    if len(set(profile.modalities)) != len(profile.modalities):
        out.append("duplicate modalities")
    ch = cfg.stage_channels
    if len(ch) != 5:
        out.append("stage_channels must have 5 entries")
    elif any(a >= b for a, b in zip(ch, ch[1:])):
        out.append("stage_channels must be strictly increasing")
    if len(cfg.input_size) != 2 or any(s <= 0 or s % 16 for s in cfg.input_size):
        out.append("input_size must be positive and divisible by 16")
    if cfg.swin_layers < 1:
        out.append("swin_layers must be >= 1")
    if cfg.swin_window < 1:
        out.append("swin_window must be >= 1")
    if ch and (cfg.swin_heads < 1 or ch[-1] % cfg.swin_heads):
        out.append("swin_heads must divide the deepest channel width")
    if ch and (cfg.cross_heads < 1 or ch[-1] % cfg.cross_heads):
        out.append("cross_heads must divide the deepest channel width")
    if cfg.cbam_reduction < 1:
        out.append("cbam_reduction must be >= 1")
    if cfg.num_classes != len(profile.class_names):
        out.append("num_classes does not match the loss mode")
    lc = profile.loss_config
    if lc.mode not in ("vascular", "brats"):
        out.append(f"unknown loss mode {lc.mode!r}")
    weights = [lc.eps, lc.gamma, lc.alpha_t, lc.alpha, lc.beta, lc.w_f, lc.w_t,
               lc.lambda_b, lc.lambda_lesion, *lc.aux_weights]
    if any(w < 0 for w in weights):
        out.append("loss weights must be non-negative")
    if len(lc.aux_weights) != 2:
        out.append("aux_weights needs one weight per auxiliary head (2)")
    aug = profile.augmentation_tier
    probs = [aug.flip_prob, aug.affine_prob, aug.elastic_prob, aug.channel_dropout_prob,
             *aug.photometric_prob]
    if any(not 0.0 <= p <= 1.0 for p in probs):
        out.append("augmentation probabilities must lie in [0,1]")
    if len(aug.photometric_prob) != 2 or aug.photometric_prob[0] > aug.photometric_prob[1]:
        out.append("photometric_prob must be a (low, high) range")
    if profile.sampler is not None:
        s = profile.sampler
        if not 0.0 < s.size_percentile < 100.0:
            out.append("sampler percentile must lie in (0,100)")
        if s.oversample_factor < 1:
            out.append("sampler oversample_factor must be >= 1")
    o = profile.optimizer
    if o.lr < 0 or o.epochs < 1 or o.batch_size < 1 or o.weight_decay < 0 or o.warmup_epochs < 0:
        out.append("optimizer values must be positive")
    return out


# ------------------------------------------------------------ serialization


def _strict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} expects an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(extra)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(obj) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v

    return conv(obj)


def model_config_from_dict(d: dict) -> ModelConfig:
    return _strict(ModelConfig, d)


def profile_from_dict(d: dict) -> TaskProfile:
    """Build a TaskProfile; when ``name`` is a preset, missing sections come from it."""
    if not isinstance(d, dict):
        raise ConfigError("profile must be an object")
    fields = {f.name for f in dataclasses.fields(TaskProfile)}
    extra = set(d) - fields
    if extra:
        raise ConfigError(f"unknown keys for TaskProfile: {sorted(extra)}")
    if "name" not in d:
        raise ConfigError("profile requires a name")
    base = task_profile(d["name"]) if d["name"] in TASKS else None

    def section(key, cls):
        if key in d:
            if d[key] is None:
                return None
            merged = config_to_dict(getattr(base, key)) if base and getattr(base, key) else {}
            merged.update(d[key])
            return _strict(cls, merged)
        if base is None:
            raise ConfigError(f"profile {d['name']!r} is not a preset; {key} is required")
        return getattr(base, key)

    modalities = d.get("modalities", base.modalities if base else None)
    if modalities is None:
        raise ConfigError("profile requires modalities")
    return TaskProfile(
        name=d["name"],
        modalities=tuple(modalities),
        loss_config=section("loss_config", LossConfig),
        augmentation_tier=section("augmentation_tier", AugmentationConfig),
        sampler=section("sampler", SamplerConfig),
        optimizer=section("optimizer", OptimizerConfig),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """Top-level JSON config: ``{"model": {...}, "profile": {...}, "training": {...}}``."""

    model: ModelConfig
    profile: TaskProfile
    val_fraction: float = 0.25
    max_steps: Optional[int] = None
    eval_every: int = 1

    def to_dict(self) -> dict:
        return {
            "model": config_to_dict(self.model),
            "profile": config_to_dict(self.profile),
            "training": {"val_fraction": self.val_fraction, "max_steps": self.max_steps,
                         "eval_every": self.eval_every},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        extra = set(d) - {"model", "profile", "training"}
        if extra:
            raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
        if "profile" not in d:
            raise ConfigError("config requires a profile section")
        profile = profile_from_dict(d["profile"])
        mdict = {"num_streams": len(profile.modalities), "num_classes": len(profile.class_names)}
        mdict.update(d.get("model", {}))
        model = model_config_from_dict(mdict)
        training = dict(d.get("training", {}))
        extra = set(training) - {"val_fraction", "max_steps", "eval_every"}
        if extra:
            raise ConfigError(f"unknown training keys: {sorted(extra)}")
        cfg = cls(model=model, profile=profile, **training)
        problems = validate_config(model, profile)
        if problems:
            raise ConfigError("; ".join(problems))
        return cfg

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.loads(fh.read())
