"""Synthetic multi-modal brain phantoms with ellipsoidal lesions."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .core_types import Mask, Volume

_STRUCT26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class PhantomSpec:
    num_subjects: int = 8
    modalities: Tuple[str, ...] = ("FLAIR", "T1w")
    shape: Tuple[int, int, int] = (8, 64, 64)  # D, H, W
    lesion_count: Tuple[int, int] = (2, 4)
    lesion_radius: Tuple[float, float] = (2.5, 6.0)  # in-plane, voxels
    lesion_radius_z: Optional[Tuple[float, float]] = (1.0, 2.5)
    # per modality: additive contrast for each nested class level
    contrast: Dict[str, Tuple[float, ...]] = field(
        default_factory=lambda: {"FLAIR": (2.0,), "T1w": (-0.5,)})
    background: Dict[str, float] = field(default_factory=lambda: {"FLAIR": 1.0, "T1w": 1.5})
    noise_sigma: float = 0.1
    seed: int = 0
    spacing: Tuple[float, float, float] = (3.0, 1.0, 1.0)
    class_names: Tuple[str, ...] = ("lesion",)
    nested_scales: Tuple[float, ...] = (1.0,)
    id_prefix: str = "phantom"

    @classmethod
    def brats_like(cls, **kw):
        base = dict(
            modalities=("T1w", "T1c", "T2w", "FLAIR"),
            class_names=("WT", "TC", "ET"),
            nested_scales=(1.0, 0.65, 0.35),
            lesion_count=(1, 2),
            lesion_radius=(6.0, 10.0),
            lesion_radius_z=(2.0, 3.0),
            contrast={"T1w": (0.0, -1.0, 0.0), "T1c": (0.0, 0.0, 2.5),
                      "T2w": (1.5, 0.5, 0.0), "FLAIR": (2.0, 0.0, 0.0)},
            background={"T1w": 1.5, "T1c": 1.2, "T2w": 1.0, "FLAIR": 1.0},
        )
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return {
            "num_subjects": self.num_subjects, "modalities": list(self.modalities),
            "shape": list(self.shape), "lesion_count": list(self.lesion_count),
            "lesion_radius": list(self.lesion_radius),
            "lesion_radius_z": list(self.lesion_radius_z) if self.lesion_radius_z else None,
            "contrast": {k: list(v) for k, v in self.contrast.items()},
            "background": dict(self.background), "noise_sigma": self.noise_sigma,
            "seed": self.seed, "spacing": list(self.spacing),
            "class_names": list(self.class_names), "nested_scales": list(self.nested_scales),
            "id_prefix": self.id_prefix,
        }

    @classmethod
    def from_dict(cls, d):
        names = set(cls.__dataclass_fields__)
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown phantom keys: {sorted(extra)}")
        kw = dict(d)
        for key in ("modalities", "shape", "lesion_count", "lesion_radius", "lesion_radius_z",
                    "spacing", "class_names", "nested_scales"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        if "contrast" in kw:
            kw["contrast"] = {k: tuple(v) for k, v in kw["contrast"].items()}
        return cls(**kw)


def _brain_mask(shape):
    d, h, w = shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ry, rx = 0.44 * h, 0.40 * w
    ell = ((yy - (h - 1) / 2) / ry) ** 2 + ((xx - (w - 1) / 2) / rx) ** 2 <= 1.0
    return np.broadcast_to(ell, shape).copy()


def _ellipsoid(shape, center, radii):
    zz, yy, xx = np.ogrid[:shape[0], :shape[1], :shape[2]]
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> List[Tuple[Volume, Mask]]:
    """Deterministic list of (Volume, Mask) pairs for ``spec``.

    Lesions are placed fully inside the brain and never touch each other, so the
    mask has exactly one 26-connected component per lesion.
    """
    d, h, w = spec.shape
    rz_range = spec.lesion_radius_z or spec.lesion_radius
    if max(spec.lesion_radius) * 2 + 1 > min(h, w) or max(rz_range) * 2 + 1 > d:
        raise ValueError("lesion radius exceeds the volume")
    if len(spec.nested_scales) != len(spec.class_names):
        raise ValueError("need one nested scale per class")
    for m in spec.modalities:
        if len(spec.contrast.get(m, ())) != len(spec.class_names):
            raise ValueError(f"contrast for {m} needs one value per class")
    rng = np.random.default_rng(spec.seed)
    brain = _brain_mask(spec.shape)
    cases = []
    for s in range(spec.num_subjects):
        levels = np.zeros((len(spec.class_names), d, h, w), dtype=bool)
        n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
        for _ in range(n_lesions):
            levels |= _place_lesion(rng, spec, brain, levels[0], rz_range)
        img = np.zeros((len(spec.modalities), d, h, w), dtype=np.float64)
        for m, name in enumerate(spec.modalities):
            img[m][brain] = spec.background.get(name, 1.0)
            for k, c in enumerate(spec.contrast[name]):
                img[m][levels[k]] += c
            if spec.noise_sigma:
                img[m][brain] += rng.normal(0.0, spec.noise_sigma, size=int(brain.sum()))
        vol = Volume(img.astype(np.float32), spec.spacing, list(spec.modalities),
                     f"{spec.id_prefix}_{s:03d}")
        cases.append((vol, Mask(levels.astype(np.uint8), list(spec.class_names))))
    return cases


def _place_lesion(rng, spec, brain, occupied, rz_range, tries=2000):
    d, h, w = spec.shape
    grown = ndimage.binary_dilation(occupied, _STRUCT26) if occupied.any() else occupied
    for _ in range(tries):
        radii = (rng.uniform(*rz_range), rng.uniform(*spec.lesion_radius),
                 rng.uniform(*spec.lesion_radius))
        center = (int(rng.integers(0, d)), int(rng.integers(0, h)), int(rng.integers(0, w)))
        outer = _ellipsoid(spec.shape, center, radii)
        if not outer.any() or (outer & ~brain).any() or (outer & grown).any():
            continue
        layers = []
        for scale in spec.nested_scales:
            # integer centre keeps every nested level nonempty
            layers.append(_ellipsoid(spec.shape, center, tuple(max(r * scale, 0.5) for r in radii)))
        return np.stack(layers)
    raise ValueError("could not place lesion; reduce lesion_count or radius")
