"""Segmentation loss primitives and the two task-specific composite objectives."""
from typing import Dict, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .core_types import LossConfig

PROB_EPS = 1e-7


def dice_loss(p, t, eps=1.0):
    """1 - (2*sum(PT) + eps) / (sum(P) + sum(T) + eps), summed over every element."""
    inter = (p * t).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + t.sum() + eps)


def focal_loss(p, y, gamma=2.0, alpha_t=0.25, clamp=PROB_EPS):
    """Mean of -alpha_t * (1 - p_t)^gamma * log(p_t); alpha_t is a uniform weight."""
    p = p.clamp(clamp, 1.0 - clamp)
    pt = torch.where(y > 0.5, p, 1.0 - p)
    return (-alpha_t * (1.0 - pt) ** gamma * torch.log(pt)).mean()


def focal_loss_logits(z, y, gamma=2.0, alpha_t=0.25):
    return focal_loss(torch.sigmoid(z), y, gamma, alpha_t)


def tversky_loss(p, t, alpha=0.3, beta=0.7, eps=1.0):
    tp = (p * t).sum()
    fp = (p * (1.0 - t)).sum()
    fn = ((1.0 - p) * t).sum()
    return 1.0 - (tp + eps) / (tp + alpha * fp + beta * fn + eps)


def focal_tversky(z, y, cfg: LossConfig):
    p = torch.sigmoid(z)
    out = 0.0
    if cfg.w_f:
        out = out + cfg.w_f * focal_loss(p, y, cfg.gamma, cfg.alpha_t)
    if cfg.w_t:
        out = out + cfg.w_t * tversky_loss(p, y, cfg.alpha, cfg.beta, cfg.eps)
    if not torch.is_tensor(out):
        out = z.sum() * 0.0
    return out


def boundary_loss(p, dist):
    """Mean of P * d_G over all elements."""
    return (p * dist).mean()


def distance_map(t: np.ndarray, spacing=(1.0, 1.0), mode="unsigned_outside", cap=None):
    """Euclidean distance map of a binary mask, computed independently per 2-D slice.

    ``t`` has shape [..., H, W]; ``spacing`` is (dy, dx) in mm.
    unsigned_outside: 0 on foreground, distance to the nearest foreground pixel elsewhere.
    signed: distance to foreground outside, minus (distance to background - 1 pixel) inside.
    Slices with no foreground get ``cap`` everywhere (default: slice diagonal in mm)
    in unsigned mode and 0 in signed mode.
    """
    t = np.asarray(t).astype(bool)
    if mode not in ("unsigned_outside", "signed"):
        raise ValueError(f"unknown distance mode {mode!r}")
    spacing = tuple(float(s) for s in spacing)
    h, w = t.shape[-2:]
    if cap is None:
        cap = float(np.hypot(h * spacing[0], w * spacing[1]))
    flat = t.reshape(-1, h, w)
    out = np.empty(flat.shape, dtype=np.float32)
    for k, sl in enumerate(flat):
        if not sl.any():
            out[k] = cap if mode == "unsigned_outside" else 0.0
            continue
        outside = ndimage.distance_transform_edt(~sl, sampling=spacing)
        if mode == "unsigned_outside":
            out[k] = outside
        elif sl.all():
            out[k] = 0.0
        else:
            inside = ndimage.distance_transform_edt(sl, sampling=spacing)
            out[k] = np.where(sl, -(inside - min(spacing)), outside)
    return out.reshape(t.shape)


def downsample_target(y, size):
    """Max-pool a binary target to ``size`` so any lesion survives."""
    return F.adaptive_max_pool2d(y, tuple(size))


def total_loss(heads, y, cfg: LossConfig, dist=None, spacing=(1.0, 1.0)
               ) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Deep-supervised composite loss; returns (total, breakdown).

    ``y`` is [B, K, H, W]; ``dist`` (vascular mode) is the matching distance map and
    is computed from ``y`` when omitted.
    """
    z_main, z_aux1, z_aux2, z_lesion = heads
    if z_main.shape != y.shape:
        raise ValueError(f"logits {tuple(z_main.shape)} do not match target {tuple(y.shape)}")
    y = y.to(z_main.dtype)
    aux = (z_aux1, z_aux2)
    if cfg.mode == "vascular":
        if dist is None:
            dist = distance_map(y.detach().cpu().numpy(), spacing, cfg.distance_mode,
                                cfg.distance_cap)
        dist = torch.as_tensor(dist, dtype=z_main.dtype, device=z_main.device)
        ft = focal_tversky(z_main, y, cfg)
        bd = boundary_loss(torch.sigmoid(z_main), dist)
        main = ft + cfg.lambda_b * bd
        aux_terms = [focal_tversky(z, y, cfg) for z in aux]
        lesion_target = y.amax(dim=1, keepdim=True)
    elif cfg.mode == "brats":
        ft = bd = None
        main = _multiclass_dice(z_main, y, cfg.eps)
        aux_terms = [_multiclass_dice(z, y, cfg.eps) for z in aux]
        lesion_target = (y > 0).any(dim=1, keepdim=True).to(y.dtype)
    else:
        raise ValueError(f"unknown loss mode {cfg.mode!r}")
    aux_loss = sum(w * a for w, a in zip(cfg.aux_weights, aux_terms))
    lesion_target = downsample_target(lesion_target, z_lesion.shape[-2:])
    if z_lesion.shape[1] != 1:
        lesion_target = lesion_target.expand_as(z_lesion)
    lesion = focal_loss_logits(z_lesion, lesion_target, cfg.gamma, cfg.alpha_t)
    total = main + aux_loss + cfg.lambda_lesion * lesion
    parts = {"main": _item(main), "aux": _item(aux_loss), "lesion": _item(lesion),
             "total": _item(total)}
    if ft is not None:
        parts["focal_tversky"] = _item(ft)
        parts["boundary"] = _item(bd)
    return total, parts


def _item(t):
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def _multiclass_dice(z, y, eps):
    p = torch.sigmoid(z)
    return torch.stack([dice_loss(p[:, k], y[:, k], eps) for k in range(y.shape[1])]).mean()
