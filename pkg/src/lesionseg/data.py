"""Preprocessing, tiered augmentation, difficulty-aware sampling and the slice dataset."""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core_types import AugmentationConfig, Mask, SamplerConfig, Volume

log = logging.getLogger(__name__)

# photometric magnitudes (Table-style tiers give only probabilities)
GAMMA_RANGE = (0.8, 1.2)
BRIGHTNESS = 0.1
CONTRAST = 0.1
ELASTIC_SPACING = 32
ELASTIC_SIGMA = 4.0


def zscore_normalize(volume: Volume, brain_mask=None, stats=None) -> Volume:
    """Per-modality z-score using moments of masked voxels inside the [P2, P98] band.

    ``brain_mask`` defaults to nonzero voxels of any modality; voxels outside it are
    set to 0. ``stats`` may carry precomputed (mean, std) per modality, e.g. pooled
    over a training cohort with :func:`band_statistics`.
    """
    data = volume.data
    if brain_mask is None:
        brain_mask = np.any(data != 0, axis=0)
    brain_mask = np.asarray(brain_mask, dtype=bool)
    if not brain_mask.any():
        raise ValueError(f"empty brain mask for subject {volume.subject_id!r}")
    out = np.zeros_like(data, dtype=np.float32)
    for m in range(data.shape[0]):
        if stats is not None:
            mean, std = stats[m]
        else:
            mean, std = band_statistics([data[m][brain_mask]])
        if std < 1e-6:
            log.warning("modality %s of %s has ~zero variance; output set to 0",
                        volume.modality_names[m], volume.subject_id)
            continue
        out[m] = np.where(brain_mask, (data[m] - mean) / std, 0.0)
    return Volume(out, volume.spacing, volume.modality_names, volume.subject_id)


def band_statistics(value_sets: Sequence[np.ndarray], lo=2.0, hi=98.0) -> Tuple[float, float]:
    """Mean and std (ddof=0) of the values lying in the pooled [P_lo, P_hi] interval."""
    vals = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in value_sets])
    p_lo, p_hi = np.percentile(vals, [lo, hi])
    band = vals[(vals >= p_lo) & (vals <= p_hi)]
    return float(band.mean()), float(band.std())


@dataclass(frozen=True)
class CropPad:
    """Per-axis record of a centre crop / symmetric pad, for inverse mapping."""

    original: Tuple[int, int]
    target: Tuple[int, int]
    crop_start: Tuple[int, int]
    pad_before: Tuple[int, int]

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = arr
        for ax, (n, t, c, p) in enumerate(zip(self.original, self.target, self.crop_start,
                                               self.pad_before)):
            axis = arr.ndim - 2 + ax
            if n > t:
                out = np.take(out, np.arange(c, c + t), axis=axis)
            elif n < t:
                widths = [(0, 0)] * out.ndim
                widths[axis] = (p, t - n - p)
                out = np.pad(out, widths)
        return out

    def invert(self, arr: np.ndarray, fill=0) -> np.ndarray:
        """Map a target-sized array back to the original geometry (cropped-away area = fill)."""
        lead = arr.shape[:-2]
        out = np.full(lead + tuple(self.original), fill, dtype=arr.dtype)
        src, dst = [], []
        for n, t, c, p in zip(self.original, self.target, self.crop_start, self.pad_before):
            if n > t:
                src.append(slice(0, t))
                dst.append(slice(c, c + t))
            else:
                src.append(slice(p, p + n))
                dst.append(slice(0, n))
        out[(..., *dst)] = arr[(..., *src)]
        return out


def crop_pad_transform(shape, target=(208, 208)) -> CropPad:
    shape, target = tuple(int(s) for s in shape[-2:]), tuple(int(t) for t in target)
    crop, pad = [], []
    for n, t in zip(shape, target):
        crop.append((n - t) // 2 if n > t else 0)
        pad.append((t - n) // 2 if n < t else 0)
    return CropPad(shape, target, tuple(crop), tuple(pad))


def crop_or_pad(arr: np.ndarray, target=(208, 208)):
    """Centre-crop or zero-pad the last two axes; returns (array, transform)."""
    tf = crop_pad_transform(arr.shape, target)
    return tf.apply(arr), tf


# ------------------------------------------------------------ augmentation


def flip(arr, axis=-1):
    return np.flip(arr, axis=axis).copy()


def _affine_matrix(angle_deg, scale, shape):
    th = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) / scale
    center = (np.asarray(shape, dtype=float) - 1) / 2
    offset = center - rot @ center
    return rot, offset


def _warp(arr, coords_fn, order):
    out = np.empty_like(arr)
    for c in range(arr.shape[0]):
        out[c] = coords_fn(arr[c], order)
    return out


def augment(image: np.ndarray, mask: np.ndarray, cfg: AugmentationConfig,
            rng: np.random.Generator):
    """Augment one slice: image [M,H,W] float, mask [K,H,W] binary.

    Geometric transforms hit image (linear) and mask (nearest) identically;
    photometric jitter and channel dropout touch the image only.
    """
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.uint8)
    h, w = image.shape[-2:]

    if cfg.flip_prob and rng.random() < cfg.flip_prob:
        image, mask = flip(image), flip(mask)

    if cfg.affine_prob and rng.random() < cfg.affine_prob:
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        scale = rng.uniform(1 - cfg.scale_frac, 1 + cfg.scale_frac)
        mat, off = _affine_matrix(angle, scale, (h, w))

        def aff(a, order):
            return ndimage.affine_transform(a, mat, offset=off, order=order, mode="constant")

        image = _warp(image, aff, 1).astype(np.float32)
        mask = _warp(mask, aff, 0)

    if cfg.elastic_prob and rng.random() < cfg.elastic_prob:
        grid = (max(2, h // ELASTIC_SPACING + 1), max(2, w // ELASTIC_SPACING + 1))
        disp = rng.normal(0.0, ELASTIC_SIGMA, size=(2, *grid))
        dy = ndimage.zoom(disp[0], (h / grid[0], w / grid[1]), order=3)[:h, :w]
        dx = ndimage.zoom(disp[1], (h / grid[0], w / grid[1]), order=3)[:h, :w]
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        coords = np.stack([yy + dy, xx + dx])

        def ela(a, order):
            return ndimage.map_coordinates(a, coords, order=order, mode="constant")

        image = _warp(image, ela, 1).astype(np.float32)
        mask = _warp(mask, ela, 0)

    lo, hi = cfg.photometric_prob
    p_photo = rng.uniform(lo, hi) if hi > lo else lo
    if p_photo and rng.random() < p_photo:
        image = _photometric(image, rng)

    if cfg.channel_dropout_prob and image.shape[0] > 1 and rng.random() < cfg.channel_dropout_prob:
        image = image.copy()
        image[rng.integers(image.shape[0])] = 0.0

    return image.astype(np.float32), (mask > 0).astype(np.uint8)


def _photometric(image, rng):
    out = np.empty_like(image)
    for c, ch in enumerate(image):
        lo, hi = float(ch.min()), float(ch.max())
        x = ch
        if hi > lo:
            gamma = rng.uniform(*GAMMA_RANGE)
            x = ((ch - lo) / (hi - lo)) ** gamma * (hi - lo) + lo
        mean = x.mean()
        x = (x - mean) * (1 + rng.uniform(-CONTRAST, CONTRAST)) + mean
        out[c] = x + rng.uniform(-BRIGHTNESS, BRIGHTNESS)
    return out


# ---------------------------------------------------------------- sampling


def difficulty_weights(areas: Sequence[float], cfg: SamplerConfig) -> np.ndarray:
    """Sampling distribution over slices; small-lesion slices get ``oversample_factor``."""
    areas = np.asarray(areas, dtype=np.float64)
    n = len(areas)
    if n == 0:
        return areas
    pos = areas[areas > 0]
    if not cfg.enabled or pos.size == 0:
        return np.full(n, 1.0 / n)
    thr = np.percentile(pos, cfg.size_percentile)
    w = np.where((areas > 0) & (areas <= thr), float(cfg.oversample_factor), 1.0)
    return w / w.sum()


# ----------------------------------------------------------- slice dataset


@dataclass
class SliceDataset:
    """Axial slices of preprocessed volumes, cropped/padded to the network size."""

    images: np.ndarray  # [S, M, H, W] float32
    masks: np.ndarray  # [S, K, H, W] uint8
    subject_ids: List[str]
    slice_index: np.ndarray  # [S] axial index within its subject
    spacing: List[Tuple[float, float]]  # per slice (dy, dx)

    def __len__(self):
        return len(self.images)

    def lesion_areas(self) -> np.ndarray:
        return self.masks.any(axis=1).reshape(len(self), -1).sum(axis=1)


def build_slice_dataset(cases: Sequence[Tuple[Volume, Mask]], size=(208, 208),
                        normalize=True) -> SliceDataset:
    images, masks, ids, idx, spacing = [], [], [], [], []
    for vol, msk in cases:
        if normalize:
            vol = zscore_normalize(vol)
        img, _ = crop_or_pad(np.moveaxis(vol.data, 1, 0), size)  # [D, M, H, W]
        seg, _ = crop_or_pad(np.moveaxis(msk.data, 1, 0), size)
        images.append(img.astype(np.float32))
        masks.append(seg.astype(np.uint8))
        d = img.shape[0]
        ids.extend([vol.subject_id] * d)
        idx.extend(range(d))
        spacing.extend([vol.spacing[1:]] * d)
    return SliceDataset(np.concatenate(images), np.concatenate(masks), ids,
                        np.asarray(idx), spacing)
