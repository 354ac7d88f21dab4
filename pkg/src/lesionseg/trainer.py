"""Training loop: warmup + cosine schedule, AdamW, weighted sampling, checkpoints, replay."""
import base64
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .core_types import (AugmentationConfig, ExperimentConfig, NumericError, OptimizerConfig)
from .data import SliceDataset, augment, difficulty_weights
from .losses import distance_map, total_loss
from .model import SegmentationNet, build_model

log = logging.getLogger(__name__)

WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "checkpoint.json"
OPTIMIZER_FILE = "optimizer.pt"


def lr_at(step: int, total_steps: int, cfg: OptimizerConfig, warmup_steps: Optional[int] = None
          ) -> float:
    """Linear ramp 0 -> lr over the warmup, then half-cosine decay to 0 at ``total_steps``.

    ``warmup_steps`` defaults to the warmup fraction warmup_epochs / epochs of the run.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps is None:
        warmup_steps = int(round(total_steps * cfg.warmup_epochs / cfg.epochs))
    warmup_steps = min(warmup_steps, total_steps)
    if step < warmup_steps:
        return cfg.lr * step / warmup_steps
    if total_steps == warmup_steps:
        return cfg.lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def steps_per_epoch(n_slices: int, batch_size: int) -> int:
    return max(1, math.ceil(n_slices / batch_size))


def make_optimizer(model, cfg: OptimizerConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8,
                             weight_decay=cfg.weight_decay)


# ------------------------------------------------------------ checkpoints


def weights_blob(model) -> bytes:
    """Raw little-endian bytes of every state tensor, in state_dict order."""
    parts = []
    for t in model.state_dict().values():
        a = t.detach().cpu().contiguous().numpy()
        parts.append(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


def weights_hash(model) -> str:
    return hashlib.sha256(weights_blob(model)).hexdigest()


def _tensor_table(model):
    return [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
            for k, v in model.state_dict().items()]


def _encode_rng(rng: np.random.Generator):
    return rng.bit_generator.state


def _decode_rng(state) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    history: List[dict] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)  # partial epoch, for resume
    best_val: float = -1.0
    best_epoch: int = -1


def save_checkpoint(out_dir, model, optimizer, config: ExperimentConfig, state: TrainState,
                    rng: np.random.Generator):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob = weights_blob(model)
    (out / WEIGHTS_FILE).write_bytes(blob)
    cfg_text = config.dumps()
    manifest = {
        "format": "lesionseg-checkpoint", "version": 1,
        "config": config.to_dict(),
        "config_hash": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "modalities": list(model.modalities),
        "tensors": _tensor_table(model),
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
        "step": state.step, "epoch": state.epoch, "history": state.history,
        "epoch_losses": state.epoch_losses, "best_val": state.best_val,
        "best_epoch": state.best_epoch,
        "rng_state": _encode_rng(rng),
        "torch_rng_state": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if optimizer is not None:
        torch.save(optimizer.state_dict(), out / OPTIMIZER_FILE)
    return out


def _resolve_checkpoint_dir(path) -> Path:
    path = Path(path)
    if (path / MANIFEST_FILE).exists():
        return path
    for sub in ("best", "last"):
        if (path / sub / MANIFEST_FILE).exists():
            return path / sub
    from .core_types import DataError

    raise DataError(f"no checkpoint found at {path}")


def load_checkpoint(path):
    """Return (model, config, manifest) from a checkpoint or training output directory."""
    from .core_types import DataError

    ck = _resolve_checkpoint_dir(path)
    manifest = json.loads((ck / MANIFEST_FILE).read_text())
    config = ExperimentConfig.from_dict(manifest["config"])
    blob = (ck / WEIGHTS_FILE).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["weights_sha256"]:
        raise DataError(f"checkpoint {ck}: weight hash mismatch")
    model = SegmentationNet(config.model, manifest["modalities"])
    state, offset = {}, 0
    for entry in manifest["tensors"]:
        dtype = getattr(torch, entry["dtype"])
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        width = torch.empty((), dtype=dtype).element_size()
        np_dtype = torch.empty((), dtype=dtype).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(blob, dtype=np_dtype, count=n, offset=offset)
        state[entry["name"]] = torch.from_numpy(arr.copy().reshape(entry["shape"]))
        offset += n * width
    model.load_state_dict(state)
    return model, config, manifest


# ------------------------------------------------------------ training


@dataclass
class TrainResult:
    model: SegmentationNet
    state: TrainState
    out_dir: Optional[Path]
    weights_sha256: str


def _batch(ds: SliceDataset, idx, aug: AugmentationConfig, rng, augment_on):
    imgs, masks = ds.images[idx], ds.masks[idx]
    if augment_on:
        pairs = [augment(i, m, aug, rng) for i, m in zip(imgs, masks)]
        imgs = np.stack([p[0] for p in pairs])
        masks = np.stack([p[1] for p in pairs])
    return imgs.astype(np.float32), masks.astype(np.float32)


def _augmentation_active(aug: AugmentationConfig) -> bool:
    return any([aug.flip_prob, aug.affine_prob, aug.elastic_prob, aug.channel_dropout_prob,
                max(aug.photometric_prob)])


@torch.no_grad()
def predict_slices(model, images: np.ndarray, batch_size=16) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        z = model(torch.from_numpy(images[i:i + batch_size]).float()).main
        out.append(torch.sigmoid(z).numpy())
    return np.concatenate(out)


def slice_dsc(model, ds: SliceDataset, tau=0.5, channel=None) -> float:
    """Mean per-subject DSC of thresholded slice predictions (no component filtering).

    Multi-class outputs are averaged over channels unless ``channel`` is given.
    """
    if len(ds) == 0:
        return float("nan")
    pred = predict_slices(model, ds.images) >= tau
    gt = ds.masks.astype(bool)
    chans = range(gt.shape[1]) if channel is None else [channel]
    ids = np.asarray(ds.subject_ids)
    scores = []
    for sid in sorted(set(ds.subject_ids)):
        sel = ids == sid
        for c in chans:
            p, g = pred[sel, c], gt[sel, c]
            denom = p.sum() + g.sum()
            scores.append(1.0 if denom == 0 else 2.0 * (p & g).sum() / denom)
    return float(np.mean(scores))


def _write_log(fh, record):
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


def train(config: ExperimentConfig, train_ds: SliceDataset, val_ds: Optional[SliceDataset] = None,
          out_dir=None, resume: bool = False, augment_on: Optional[bool] = None) -> TrainResult:
    """Run (or resume) training; checkpoints go to ``out_dir``/best and ``out_dir``/last.

    One epoch is ceil(len(train_ds) / batch_size) weighted draws with replacement.
    ``config.max_steps`` stops early (mid-epoch allowed); the schedule still spans
    the full ``epochs``, so a stopped run can be resumed exactly.
    """
    torch.set_num_threads(1)
    profile = config.profile
    ocfg = profile.optimizer
    lcfg = profile.loss_config
    if val_ds is None:
        val_ds = train_ds
    out = Path(out_dir) if out_dir is not None else None
    if augment_on is None:
        augment_on = _augmentation_active(profile.augmentation_tier)

    torch.manual_seed(ocfg.seed)
    model = build_model(config.model, profile.modalities, seed=ocfg.seed)
    optimizer = make_optimizer(model, ocfg)
    rng = np.random.default_rng(ocfg.seed)
    state = TrainState()
    if resume:
        ck = out / "last"
        model, _, manifest = load_checkpoint(ck)
        optimizer = make_optimizer(model, ocfg)
        optimizer.load_state_dict(torch.load(ck / OPTIMIZER_FILE))
        rng = _decode_rng(manifest["rng_state"])
        raw = base64.b64decode(manifest["torch_rng_state"])
        torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
        state = TrainState(manifest["step"], manifest["epoch"], manifest["history"],
                           manifest["epoch_losses"], manifest["best_val"], manifest["best_epoch"])

    spe = steps_per_epoch(len(train_ds), ocfg.batch_size)
    total = spe * ocfg.epochs
    warmup = min(total, ocfg.warmup_epochs * spe)
    limit = total if config.max_steps is None else min(total, config.max_steps)
    sampler = profile.sampler
    areas = train_ds.lesion_areas()
    if sampler is not None and sampler.enabled:
        weights = difficulty_weights(areas, sampler)
    else:
        weights = np.full(len(train_ds), 1.0 / len(train_ds))

    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume else "w")
    try:
        model.train()
        while state.step < limit:
            idx = rng.choice(len(train_ds), size=ocfg.batch_size, replace=True, p=weights)
            imgs, masks = _batch(train_ds, idx, profile.augmentation_tier, rng, augment_on)
            # lr for update k uses the schedule at k + 1 so the first update is nonzero
            lr = lr_at(min(state.step + 1, total), total, ocfg, warmup)
            for g in optimizer.param_groups:
                g["lr"] = lr
            x, y = torch.from_numpy(imgs), torch.from_numpy(masks)
            dist = None
            if lcfg.mode == "vascular":
                sp = [train_ds.spacing[i] for i in idx]
                dist = np.stack([distance_map(m, s, lcfg.distance_mode, lcfg.distance_cap)
                                 for m, s in zip(masks, sp)])
            heads = model(x)
            loss, parts = total_loss(heads, y, lcfg, dist)
            if not torch.isfinite(loss):
                if out is not None:
                    np.savez(out / "nan_batch.npz", images=imgs, masks=masks, indices=idx,
                             step=state.step)
                raise NumericError(f"non-finite loss at step {state.step} (batch slices {idx.tolist()})")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if ocfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), ocfg.grad_clip)
            optimizer.step()
            state.step += 1
            state.epoch_losses.append(float(loss.detach()))
            _write_log(log_fh, {"event": "step", "step": state.step, "epoch": state.epoch,
                                "lr": lr, **{k: round(v, 8) for k, v in parts.items()}})
            if state.step % spe == 0:
                _end_epoch(model, state, val_ds, config, out, optimizer, rng, log_fh)
                model.train()
        if out is not None:
            save_checkpoint(out / "last", model, optimizer, config, state, rng)
            if not (out / "best" / MANIFEST_FILE).exists():
                save_checkpoint(out / "best", model, None, config, state, rng)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return TrainResult(model, state, out, weights_hash(model))


def _end_epoch(model, state, val_ds, config, out, optimizer, rng, log_fh):
    val = slice_dsc(model, val_ds) if (state.epoch + 1) % config.eval_every == 0 else None
    record = {"epoch": state.epoch, "step": state.step,
              "loss": float(np.mean(state.epoch_losses)), "val_dsc": val}
    state.history.append(record)
    state.epoch_losses = []
    state.epoch += 1
    _write_log(log_fh, {"event": "epoch", **record})
    if val is not None and val > state.best_val:
        state.best_val, state.best_epoch = val, record["epoch"]
        if out is not None:
            save_checkpoint(out / "best", model, None, config, state, rng)
    log.info("epoch %d loss %.4f val_dsc %s", record["epoch"], record["loss"], val)


def split_subjects(ids: Sequence[str], val_fraction: float, seed: int):
    """Deterministic subject-level split; val_fraction=0 returns (all, [])."""
    ids = sorted(set(ids))
    n_val = int(round(len(ids) * val_fraction))
    if val_fraction > 0:
        n_val = max(1, min(n_val, len(ids) - 1))
    order = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    return [i for i in ids if i not in val], val
