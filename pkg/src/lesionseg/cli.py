"""Command-line entry points.

Exit codes: 0 ok, 2 configuration error, 3 data error (including leakage refusals),
4 numeric failure during training.
"""
import argparse
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .core_types import ConfigError, DataError, ExperimentConfig, NumericError
from .data import build_slice_dataset
from .phantom import PhantomSpec, generate_phantom

log = logging.getLogger("lesionseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, command, args, started, seed=None, config_path=None):
    """Record inputs and hashes of every artifact under ``out_dir`` (timestamps unhashed)."""
    out = Path(out_dir)
    artifacts = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            artifacts[str(p.relative_to(out))] = _sha256(p)
    manifest = {
        "command": command,
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(args.items())},
        "config_path": str(config_path) if config_path else None,
        "config_sha256": _sha256(config_path) if config_path else None,
        "seed": seed,
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
        "artifacts": artifacts,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _args_dict(ns):
    return {k: v for k, v in vars(ns).items() if k != "func"}


# ------------------------------------------------------------ commands


def cmd_phantom(ns):
    started = _now()
    spec = PhantomSpec.brats_like() if ns.preset == "brats" else PhantomSpec()
    if ns.spec:
        try:
            d = json.loads(Path(ns.spec).read_text())
            base = spec.to_dict()
            base.update(d)
            spec = PhantomSpec.from_dict(base)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad phantom spec: {exc}") from exc
    given = (("seed", ns.seed), ("num_subjects", ns.num_subjects), ("id_prefix", ns.id_prefix))
    overrides = {k: v for k, v in given if v is not None}
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    from .io import save_raw_case

    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cases = generate_phantom(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for vol, mask in cases:
        save_raw_case(vol, mask, out, seed=spec.seed)
    (out / "phantom_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    write_manifest(out, "phantom", _args_dict(ns), started, seed=spec.seed)
    return EXIT_OK


def _load_config(ns):
    cfg = ExperimentConfig.load(ns.config)
    prof = cfg.profile
    opt_over = {}
    if ns.seed is not None:
        opt_over["seed"] = ns.seed
    if ns.epochs is not None:
        opt_over["epochs"] = ns.epochs
    if opt_over:
        prof = dataclasses.replace(prof, optimizer=dataclasses.replace(prof.optimizer, **opt_over))
    train_over = {}
    if ns.max_steps is not None:
        train_over["max_steps"] = ns.max_steps
    return dataclasses.replace(cfg, profile=prof, **train_over)


def _labelled(cases, what):
    for vol, mask in cases:
        if mask is None:
            raise DataError(f"subject {vol.subject_id}: {what} case has no mask")
    return cases


def cmd_train(ns):
    from .io import load_dataset
    from .plotting import training_curves
    from .trainer import split_subjects, train

    started = _now()
    try:
        cfg = _load_config(ns)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    prof = cfg.profile
    classes = prof.class_names
    cases = _labelled(load_dataset(ns.data, prof.modalities, classes), "training")
    if ns.val_data:
        train_cases = cases
        val_cases = _labelled(load_dataset(ns.val_data, prof.modalities, classes), "validation")
    else:
        tr_ids, va_ids = split_subjects([v.subject_id for v, _ in cases], cfg.val_fraction,
                                        prof.optimizer.seed)
        train_cases = [c for c in cases if c[0].subject_id in tr_ids]
        val_cases = [c for c in cases if c[0].subject_id in va_ids] or train_cases
    for _, m in train_cases + val_cases:
        if list(m.class_names) != list(classes):
            raise DataError(f"mask classes {m.class_names} do not match the profile {classes}")
    size = cfg.model.input_size
    train_ds = build_slice_dataset(train_cases, size)
    val_ds = build_slice_dataset(val_cases, size)
    out = Path(ns.out)
    result = train(cfg, train_ds, val_ds, out, resume=ns.resume)
    training_curves(result.state.history, out / "training_curves.png")
    (out / "history.json").write_text(json.dumps(result.state.history, indent=2, sort_keys=True))
    write_manifest(out, "train", _args_dict(ns), started, seed=prof.optimizer.seed,
                   config_path=ns.config)
    return EXIT_OK


def _grid(text, kind):
    try:
        parts = [kind(p) for p in text.split(":")]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}") from exc
    if kind is int and len(parts) == 2:
        return tuple(range(parts[0], parts[1] + 1))
    if kind is float and len(parts) == 3:
        lo, hi, step = parts
        n = int(round((hi - lo) / step)) + 1
        return tuple(float(round(lo + i * step, 10)) for i in range(n))
    raise ConfigError(f"bad grid {text!r}")


def _window(ns):
    return tuple(ns.window) if ns.window else None


def cmd_tune(ns):
    from .inference import ValidationCase, sliding_window_predict, tune_params
    from .io import load_dataset
    from .trainer import load_checkpoint

    started = _now()
    model, cfg, _ = load_checkpoint(ns.checkpoint)
    classes = cfg.profile.class_names
    cases = _labelled(load_dataset(ns.val_data, cfg.profile.modalities, classes), "validation")
    val = []
    for vol, mask in cases:
        pv = sliding_window_predict(vol, model, _window(ns), ns.overlap)
        val.append(ValidationCase(vol.subject_id, pv.probs, mask.data, "validation"))
    result = tune_params(val, _grid(ns.tau_grid, float), _grid(ns.s_grid, int), ns.connectivity)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "params.json").write_text(result.to_json())
    write_manifest(out, "tune", _args_dict(ns), started)
    return EXIT_OK


def _load_params(path):
    from .inference import PostprocessParams

    try:
        return PostprocessParams.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"cannot read post-processing parameters: {exc}") from exc


def cmd_predict(ns):
    from .inference import binarize_and_filter, check_params_for_test, sliding_window_predict
    from .io import load_dataset, save_mask
    from .trainer import load_checkpoint

    started = _now()
    model, cfg, _ = load_checkpoint(ns.checkpoint)
    params = _load_params(ns.params)
    cases = load_dataset(getattr(ns, "in"), cfg.profile.modalities, cfg.profile.class_names)
    check_params_for_test(params, [v.subject_id for v, _ in cases])
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for vol, _ in cases:
        pv = sliding_window_predict(vol, model, _window(ns), ns.overlap)
        mask = binarize_and_filter(pv, params, cfg.profile.class_names)
        save_mask(mask, out / f"{vol.subject_id}.nii.gz", vol.spacing, vol.affine)
    write_manifest(out, "predict", _args_dict(ns), started)
    return EXIT_OK


def _score(pred_dir, gt, class_names, connectivity, iou):
    from .io import load_masks
    from .metrics import case_metrics

    preds = load_masks(pred_dir, class_names)
    rows = []
    for sid, (g, spacing) in sorted(gt.items()):
        if sid not in preds:
            raise DataError(f"subject {sid}: no prediction in {pred_dir}")
        p = preds[sid][0]
        if p.data.shape != g.data.shape:
            raise DataError(f"subject {sid}: prediction shape {p.data.shape} does not match "
                            f"ground truth {g.data.shape}")
        rows.extend(case_metrics(p.data, g.data, spacing, sid, g.class_names, connectivity, iou))
    return rows


def cmd_evaluate(ns):
    from .io import load_masks
    from .metrics import aggregate
    from .plotting import metric_boxplots

    started = _now()
    classes = ns.classes.split(",")
    gt = load_masks(ns.gt, classes)
    if not gt:
        raise DataError(f"no ground-truth masks in {ns.gt}")
    class_names = next(iter(gt.values()))[0].class_names
    rows = _score(ns.pred, gt, class_names, ns.connectivity, ns.iou_threshold)
    baseline = None
    if ns.baseline:
        baseline = _score(ns.baseline, gt, class_names, ns.connectivity, ns.iou_threshold)
    report = aggregate(rows, baseline)
    out = Path(ns.out)
    report.write(out)
    metric_boxplots(report, out / "figures")
    write_manifest(out, "evaluate", _args_dict(ns), started)
    return EXIT_OK


def cmd_overlay(ns):
    from .io import load_dataset, load_masks
    from .plotting import save_overlays

    started = _now()
    classes = ns.classes.split(",")
    modalities = [ns.modality] if ns.modality else None
    images = {v.subject_id: v for v, _ in load_dataset(ns.image, modalities, classes)}
    gt = load_masks(ns.gt, classes)
    class_names = next(iter(gt.values()))[0].class_names
    preds = load_masks(ns.pred, class_names)
    out = Path(ns.out)
    subjects = [ns.subject] if ns.subject else sorted(gt)
    for sid in subjects:
        if sid not in images or sid not in preds or sid not in gt:
            raise DataError(f"subject {sid}: image, prediction or ground truth missing")
        vol = images[sid]
        m = vol.modality_names.index(ns.modality) if ns.modality else 0
        p, g = preds[sid][0].data[ns.class_index], gt[sid][0].data[ns.class_index]
        if p.shape != g.shape or p.shape != vol.shape:
            raise DataError(f"subject {sid}: image, prediction and ground truth differ in shape")
        save_overlays(vol.data[m], p, g, out / sid)
    write_manifest(out, "overlay", _args_dict(ns), started)
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser():
    ap = argparse.ArgumentParser(prog="lesionseg", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a deterministic synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--spec", type=Path, help="JSON phantom spec (overrides the preset)")
    p.add_argument("--preset", choices=("default", "brats"), default="default")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-subjects", type=int)
    p.add_argument("--id-prefix", help="subject id prefix (default: phantom)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a model from a JSON experiment config")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--val-data", type=Path, help="separate validation set (default: split)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last")
    p.set_defaults(func=cmd_train)

    def window_flags(p):
        p.add_argument("--window", type=int, nargs=2, metavar=("H", "W"),
                       help="sliding-window size (default: full network input)")
        p.add_argument("--overlap", type=float, default=0.5)

    p = sub.add_parser("tune", help="grid-search (tau, S_min) on validation cases")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--val-data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--tau-grid", default="0.10:0.80:0.05", help="lo:hi:step")
    p.add_argument("--s-grid", default="2:15", help="lo:hi (inclusive)")
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    window_flags(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("predict", help="write post-processed NIfTI masks")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--params", required=True, type=Path)
    p.add_argument("--in", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    window_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--baseline", type=Path, help="second prediction set for paired t-tests")
    p.add_argument("--classes", default="lesion", help="comma list, e.g. WT,TC,ET for NIfTI")
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    p.add_argument("--iou-threshold", type=float)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("overlay", help="per-slice PNGs: TP green, FN red, FP blue")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--modality")
    p.add_argument("--subject")
    p.add_argument("--class-index", type=int, default=0)
    p.add_argument("--classes", default="lesion")
    p.set_defaults(func=cmd_overlay)
    return ap


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.func(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
