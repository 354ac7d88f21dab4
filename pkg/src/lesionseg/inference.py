"""Sliding-window probability volumes, validation-only threshold tuning, post-processing."""
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from .core_types import ConfigError, DataError, Mask, Volume
from .data import CropPad, crop_or_pad, zscore_normalize
from .metrics import aggregate, case_metrics

VALIDATION_ONLY = "validation-only"
DEFAULT_TAU_GRID = tuple(np.round(np.arange(0.10, 0.80 + 1e-9, 0.05), 2).tolist())
DEFAULT_S_GRID = tuple(range(2, 16))

_STRUCT = {6: ndimage.generate_binary_structure(3, 1), 26: np.ones((3, 3, 3), dtype=bool)}


class LeakageError(DataError):
    """Tuning or evaluation would mix validation and test subjects."""


@dataclass
class ProbabilityVolume:
    probs: np.ndarray  # [K, D, H, W] float32 in [0, 1], original geometry
    subject_id: str = ""
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    transform: Optional[CropPad] = None  # slice crop/pad applied before the network

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float32)
        if self.probs.ndim != 4:
            raise ValueError("probabilities must be [K,D,H,W]")


@dataclass(frozen=True)
class PostprocessParams:
    tau: float = 0.5
    s_min: int = 0
    connectivity: int = 26
    provenance: Optional[str] = None
    tuned_on: Tuple[str, ...] = ()
    mean_dsc: Optional[float] = None

    def to_dict(self):
        return {"tau": self.tau, "s_min": self.s_min, "connectivity": self.connectivity,
                "provenance": self.provenance, "tuned_on": list(self.tuned_on),
                "mean_dsc": self.mean_dsc}

    @classmethod
    def from_dict(cls, d):
        known = {"tau", "s_min", "connectivity", "provenance", "tuned_on", "mean_dsc"}
        extra = set(d) - known - {"grid_scores", "tau_grid", "s_grid", "per_channel"}
        if extra:
            raise ConfigError(f"unknown post-processing keys: {sorted(extra)}")
        kw = {k: d[k] for k in known if k in d}
        kw["tuned_on"] = tuple(kw.get("tuned_on", ()))
        return cls(**kw)


# ------------------------------------------------------------ sliding window


def gaussian_importance(window: Tuple[int, int], sigma_scale=1.0 / 8) -> np.ndarray:
    """Separable Gaussian centred on the window, sigma = sigma_scale * side, peak 1."""
    axes = []
    for n in window:
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        axes.append(np.exp(-0.5 * (x / (sigma_scale * n)) ** 2))
    return np.outer(axes[0], axes[1])


def tile_starts(n: int, win: int, overlap: float) -> List[int]:
    if win > n:
        raise ValueError(f"window {win} exceeds padded size {n}")
    step = max(1, int(round(win * (1.0 - overlap))))
    starts = list(range(0, n - win + 1, step))
    if starts[-1] != n - win:
        starts.append(n - win)
    return starts


def blend_tiles(tile_probs, starts, window, shape, sigma_scale=1.0 / 8):
    """Gaussian-weighted average of tile outputs ``[T, K, wh, ww]`` placed at ``starts``."""
    weight = gaussian_importance(window, sigma_scale)
    k = tile_probs.shape[1]
    num = np.zeros((k, *shape), dtype=np.float64)
    den = np.zeros(shape, dtype=np.float64)
    for p, (y, x) in zip(tile_probs, starts):
        num[:, y:y + window[0], x:x + window[1]] += p * weight
        den[y:y + window[0], x:x + window[1]] += weight
    return num / den


@torch.no_grad()
def predict_slice(image: np.ndarray, model, window=None, overlap=0.5, sigma_scale=1.0 / 8,
                  batch_size=8) -> np.ndarray:
    """Probabilities [K, H, W] for one preprocessed slice [M, H, W]."""
    h, w = image.shape[-2:]
    window = tuple(window or (h, w))
    starts = [(y, x) for y in tile_starts(h, window[0], overlap)
              for x in tile_starts(w, window[1], overlap)]
    tiles = np.stack([image[:, y:y + window[0], x:x + window[1]] for y, x in starts])
    outs = []
    for i in range(0, len(tiles), batch_size):
        z = model(torch.from_numpy(tiles[i:i + batch_size]).float()).main
        outs.append(torch.sigmoid(z).double().numpy())
    probs = np.concatenate(outs)
    if len(starts) == 1:
        return probs[0]
    return blend_tiles(probs, starts, window, (h, w), sigma_scale)


def sliding_window_predict(volume: Volume, model, window=None, overlap=0.5,
                           sigma_scale=1.0 / 8, normalize=True, batch_size=8
                           ) -> ProbabilityVolume:
    """Slice-wise probabilities mapped back to the original volume geometry.

    Each axial slice is cropped/padded to the network input size, tiled with
    ``window`` at the given overlap, and the tiles are blended with a Gaussian map.
    ``window`` defaults to the full input size (a single tile).
    """
    n_streams = model.cfg.num_streams
    if volume.data.shape[0] != n_streams:
        raise ConfigError(f"model expects {n_streams} modalities, volume has "
                          f"{volume.data.shape[0]}")
    if list(volume.modality_names) != list(model.modalities):
        raise ConfigError(f"modality order {volume.modality_names} differs from model "
                          f"{model.modalities}")
    if normalize:
        volume = zscore_normalize(volume)
    size = model.cfg.input_size
    slices, tf = crop_or_pad(np.moveaxis(volume.data, 1, 0), size)  # [D, M, h, w]
    window = tuple(window or size)
    if window[0] > size[0] or window[1] > size[1]:
        raise ValueError(f"window {window} exceeds padded slice size {size}")
    model.eval()
    probs = np.stack([predict_slice(s, model, window, overlap, sigma_scale, batch_size)
                      for s in slices])  # [D, K, h, w]
    probs = tf.invert(np.moveaxis(probs, 1, 0), fill=0.0)
    return ProbabilityVolume(np.clip(probs, 0.0, 1.0), volume.subject_id, volume.spacing, tf)


# ------------------------------------------------------------ post-processing


def remove_small_components(mask: np.ndarray, s_min: int, connectivity=26) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if s_min <= 1 or not mask.any():
        return mask
    labels, n = ndimage.label(mask, structure=_STRUCT[connectivity])
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= s_min
    keep[0] = False
    return keep[labels]


def binarize_and_filter(probs, params, class_names=None) -> Mask:
    """P >= tau, then drop 3-D components smaller than ``s_min`` voxels, per channel.

    ``params`` may be one PostprocessParams or one per channel.
    """
    if isinstance(probs, ProbabilityVolume):
        probs = probs.probs
    probs = np.asarray(probs)
    k = probs.shape[0]
    per = list(params) if isinstance(params, (list, tuple)) else [params] * k
    if len(per) != k:
        raise ValueError("need one parameter set per channel")
    out = np.stack([remove_small_components(probs[c] >= p.tau, p.s_min, p.connectivity)
                    for c, p in enumerate(per)])
    names = class_names or (["lesion"] if k == 1 else [f"class{c}" for c in range(k)])
    return Mask(out.astype(np.uint8), names)


# ------------------------------------------------------------ tuning


@dataclass
class ValidationCase:
    subject_id: str
    probs: np.ndarray  # [K, D, H, W]
    gt: np.ndarray  # [K, D, H, W]
    split: str = "validation"


@dataclass
class TuneResult:
    params: PostprocessParams
    mean_dsc: float
    grid_scores: List[List[float]] = field(default_factory=list)  # [tau][s_min]
    tau_grid: Tuple[float, ...] = ()
    s_grid: Tuple[int, ...] = ()

    def to_dict(self):
        d = self.params.to_dict()
        d.update(grid_scores=self.grid_scores, tau_grid=list(self.tau_grid),
                 s_grid=list(self.s_grid))
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def check_validation_only(cases: Sequence[ValidationCase]):
    bad = [c.subject_id for c in cases if c.split != "validation"]
    if bad:
        raise LeakageError(f"tuning refused: non-validation cases {bad}")


class _CaseTable:
    """Per (case, channel, tau): component sizes and overlaps, so every S_min is cheap."""

    def __init__(self, probs, gt, connectivity):
        self.probs = probs
        self.gt = gt.astype(bool)
        self.gt_count = int(self.gt.sum())
        self.struct = _STRUCT[connectivity]

    def at(self, tau):
        labels, n = ndimage.label(self.probs >= tau, structure=self.struct)
        sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
        hits = np.bincount(labels.ravel(), weights=self.gt.ravel(), minlength=n + 1)[1:]
        return sizes, hits

    def dsc(self, sizes, hits, s_min):
        keep = sizes >= s_min
        denom = int(sizes[keep].sum()) + self.gt_count
        return 1.0 if denom == 0 else 2.0 * float(hits[keep].sum()) / denom


def tune_params(cases: Sequence[ValidationCase], tau_grid=DEFAULT_TAU_GRID,
                s_grid=DEFAULT_S_GRID, connectivity=26, channels=None) -> TuneResult:
    """Exhaustive (tau, S_min) scan maximizing the cohort-mean DSC.

    The scan visits tau in grid order, then S_min, and only a strictly better score
    replaces the incumbent, so ties go to the first cell visited. For multi-channel
    volumes the score is the DSC averaged over ``channels`` (default: all).
    """
    tau_grid, s_grid = tuple(float(t) for t in tau_grid), tuple(int(s) for s in s_grid)
    if not tau_grid or not s_grid:
        raise ValueError("empty tuning grid")
    if not cases:
        raise ValueError("tuning needs at least one validation case")
    check_validation_only(cases)
    k = cases[0].probs.shape[0]
    channels = list(range(k)) if channels is None else list(channels)
    tables = [_CaseTable(c.probs[ch], c.gt[ch], connectivity) for c in cases for ch in channels]
    n = len(tables)
    scores = np.zeros((len(tau_grid), len(s_grid)))
    for i, tau in enumerate(tau_grid):
        at = [t.at(tau) for t in tables]
        for j, s in enumerate(s_grid):
            scores[i, j] = sum(t.dsc(sz, hit, s) for t, (sz, hit) in zip(tables, at)) / n
    best, best_ij = -1.0, None
    for i in range(len(tau_grid)):
        for j in range(len(s_grid)):
            if scores[i, j] > best:
                best, best_ij = scores[i, j], (i, j)
    i, j = best_ij
    params = PostprocessParams(tau_grid[i], s_grid[j], connectivity, VALIDATION_ONLY,
                               tuple(sorted(c.subject_id for c in cases)), float(best))
    return TuneResult(params, float(best), scores.tolist(), tau_grid, s_grid)


def tune_per_channel(cases, tau_grid=DEFAULT_TAU_GRID, s_grid=DEFAULT_S_GRID,
                     connectivity=26) -> List[TuneResult]:
    k = cases[0].probs.shape[0]
    return [tune_params(cases, tau_grid, s_grid, connectivity, [c]) for c in range(k)]


# ------------------------------------------------------------ test stage


def check_params_for_test(params, test_ids: Sequence[str]):
    per = list(params) if isinstance(params, (list, tuple)) else [params]
    for p in per:
        if p.provenance != VALIDATION_ONLY:
            raise LeakageError("post-processing parameters lack validation-only provenance")
        overlap = sorted(set(p.tuned_on) & set(test_ids))
        if overlap:
            raise LeakageError(f"test subjects were used for tuning: {overlap}")


def evaluate_test(cases: Sequence[Tuple[Volume, Mask]], model, params, window=None,
                  overlap=0.5, connectivity=None, normalize=True):
    """Predict, post-process and score each test case; returns a CohortReport."""
    check_params_for_test(params, [v.subject_id for v, _ in cases])
    rows = []
    for vol, gt in cases:
        pv = sliding_window_predict(vol, model, window, overlap, normalize=normalize)
        pred = binarize_and_filter(pv, params, gt.class_names)
        conn = connectivity or (params[0] if isinstance(params, (list, tuple))
                                else params).connectivity
        rows.extend(case_metrics(pred.data, gt.data, vol.spacing, vol.subject_id,
                                 gt.class_names, conn))
    return aggregate(rows)
