"""Voxel- and lesion-level metrics, cohort aggregation and paired significance tests."""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, stats

SCHEMA_VERSION = 1
METRICS = ("dsc", "hd95", "avd", "lesion_recall", "lesion_f1")
AVD_SENTINEL = -1.0

_STRUCT = {6: ndimage.generate_binary_structure(3, 1), 26: np.ones((3, 3, 3), dtype=bool)}


def _bool(a):
    return np.asarray(a).astype(bool)


def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")


def dsc(pred, gt) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    pred, gt = _bool(pred), _bool(gt)
    _check_shapes(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    denom = int(np.count_nonzero(pred)) + int(np.count_nonzero(gt))
    return 1.0 if denom == 0 else 2.0 * tp / denom


def surface(mask) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour in the background (outside counts)."""
    mask = _bool(mask)
    return mask & ~ndimage.binary_erosion(mask, _STRUCT[6], border_value=0)


def diagonal_mm(shape, spacing) -> float:
    return float(math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def directed_surface_distances(a, b, spacing) -> np.ndarray:
    """Distance (mm) from each surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    spacing = np.asarray(spacing, dtype=np.float64)
    _, idx = ndimage.distance_transform_edt(~sb, sampling=spacing, return_indices=True)
    pts = np.argwhere(sa)
    nearest = idx[(slice(None), *pts.T)].T
    # recompute from integer offsets so the result is independent of EDT rounding
    off = (pts - nearest) * spacing
    return np.sqrt((off ** 2).sum(axis=1))


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Max of the two directed 95th-percentile surface distances, in mm.

    If either mask is empty the volume diagonal is returned as a sentinel; use
    :func:`hd95_is_sentinel` to tell the cases apart.
    """
    pred, gt = _bool(pred), _bool(gt)
    _check_shapes(pred, gt)
    if hd95_is_sentinel(pred, gt):
        return diagonal_mm(pred.shape, spacing)
    d_pg = directed_surface_distances(pred, gt, spacing)
    d_gp = directed_surface_distances(gt, pred, spacing)
    return float(max(percentile(d_pg, 95), percentile(d_gp, 95)))


def percentile(values, q) -> float:
    """Linear-interpolation percentile, v[lo] + (v[hi] - v[lo]) * frac, with a fixed formula."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    pos = (len(v) - 1) * q / 100
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return float(v[lo] + (v[hi] - v[lo]) * (pos - lo))


def hd95_is_sentinel(pred, gt) -> bool:
    return not (np.any(pred) and np.any(gt))


def avd(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """|V_gt - V_pred| / V_gt * 100; ``AVD_SENTINEL`` when the ground truth is empty."""
    pred, gt = _bool(pred), _bool(gt)
    _check_shapes(pred, gt)
    voxel = float(np.prod(spacing))
    v_gt = np.count_nonzero(gt) * voxel
    if v_gt == 0:
        return AVD_SENTINEL
    v_pred = np.count_nonzero(pred) * voxel
    return abs(v_gt - v_pred) / v_gt * 100.0


def label_components(mask, connectivity=26):
    if connectivity not in _STRUCT:
        raise ValueError("connectivity must be 6 or 26")
    return ndimage.label(_bool(mask), structure=_STRUCT[connectivity])


def lesion_match(pred, gt, connectivity=26, iou_threshold: Optional[float] = None
                 ) -> Tuple[int, int, int]:
    """(N_TP_L, N_FP_L, N_FN_L) from 3-D connected components.

    By default a GT lesion counts as detected when any predicted voxel overlaps it, and
    a predicted component is a false positive when it overlaps no GT voxel. With
    ``iou_threshold`` a match additionally needs component IoU >= the threshold.
    """
    pred, gt = _bool(pred), _bool(gt)
    _check_shapes(pred, gt)
    lg, ng = label_components(gt, connectivity)
    lp, npred = label_components(pred, connectivity)
    if iou_threshold is None:
        hit_gt = np.unique(lg[pred & (lg > 0)])
        hit_pred = np.unique(lp[gt & (lp > 0)])
        tp = len(hit_gt)
        return tp, npred - len(hit_pred), ng - tp
    both = (lg > 0) & (lp > 0)
    pairs = np.stack([lg[both], lp[both]], axis=1)
    inter = {}
    for g, p in map(tuple, pairs):
        inter[(g, p)] = inter.get((g, p), 0) + 1
    size_g = np.bincount(lg.ravel(), minlength=ng + 1)
    size_p = np.bincount(lp.ravel(), minlength=npred + 1)
    matched_g, matched_p = set(), set()
    for (g, p), n in inter.items():
        if n / (size_g[g] + size_p[p] - n) >= iou_threshold:
            matched_g.add(g)
            matched_p.add(p)
    return len(matched_g), npred - len(matched_p), ng - len(matched_g)


def lesion_recall(counts) -> float:
    tp, fp, fn = counts
    if tp + fn == 0:
        return 1.0 if fp == 0 else 0.0
    return tp / (tp + fn)


def lesion_f1(counts) -> float:
    tp, fp, fn = counts
    if 2 * tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2 * tp + fp + fn)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    n: int
    degenerate: bool = False  # zero-variance differences: t undefined, p reported as 1


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-tailed paired t-test on a - b with n - 1 degrees of freedom."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0 or not np.isfinite(sd):
        return TTestResult(float("nan"), 1.0, n, True)
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), n - 1)
    return TTestResult(float(t), float(min(p, 1.0)), n)


# ------------------------------------------------------------ per case


@dataclass(frozen=True)
class CaseMetrics:
    subject_id: str
    class_name: str
    dsc: float
    hd95: float
    avd: float
    lesion_recall: float
    lesion_f1: float
    tp_l: int
    fp_l: int
    fn_l: int
    hd95_sentinel: bool = False
    avd_sentinel: bool = False

    def excluded(self, metric: str) -> bool:
        return (metric == "hd95" and self.hd95_sentinel) or (metric == "avd" and self.avd_sentinel)


def case_metrics(pred: np.ndarray, gt: np.ndarray, spacing, subject_id: str,
                 class_names: Sequence[str], connectivity=26,
                 iou_threshold: Optional[float] = None) -> List[CaseMetrics]:
    """Metrics for every class channel of a [K, D, H, W] prediction / ground-truth pair."""
    pred, gt = _bool(pred), _bool(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"subject {subject_id}: geometry mismatch, pred {pred.shape} "
                         f"vs gt {gt.shape}")
    if len(class_names) != pred.shape[0]:
        raise ValueError("one class name per channel required")
    rows = []
    for k, name in enumerate(class_names):
        p, g = pred[k], gt[k]
        counts = lesion_match(p, g, connectivity, iou_threshold)
        a = avd(p, g, spacing)
        rows.append(CaseMetrics(
            subject_id=subject_id, class_name=name, dsc=dsc(p, g), hd95=hd95(p, g, spacing),
            avd=a, lesion_recall=lesion_recall(counts), lesion_f1=lesion_f1(counts),
            tp_l=counts[0], fp_l=counts[1], fn_l=counts[2],
            hd95_sentinel=hd95_is_sentinel(p, g), avd_sentinel=a == AVD_SENTINEL,
        ))
    return rows


# ------------------------------------------------------------ cohort


@dataclass(frozen=True)
class MetricSummary:
    mean: Optional[float]
    sd: Optional[float]
    n: int
    excluded: int = 0
    single_case: bool = False  # SD undefined for n = 1; reported as 0


@dataclass
class CohortReport:
    cases: List[CaseMetrics]
    summary: Dict[str, Dict[str, MetricSummary]]  # class -> metric -> summary
    paired_tests: Dict[str, Dict[str, TTestResult]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "summary": {c: {m: asdict(s) for m, s in ms.items()} for c, ms in self.summary.items()},
            "paired_tests": {c: {m: _ttest_dict(r) for m, r in ms.items()}
                             for c, ms in self.paired_tests.items()},
            "cases": [asdict(c) for c in self.cases],
        }

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in CaseMetrics.__dataclass_fields__.values()]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for c in self.cases:
            writer.writerow([_fmt(getattr(c, n)) for n in names])
        return buf.getvalue()

    def write(self, out_dir, stem="metrics"):
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}_summary.json").write_text(self.to_json())
        return out / f"{stem}.csv", out / f"{stem}_summary.json"

    def mean(self, metric: str, class_name: Optional[str] = None) -> float:
        class_name = class_name or next(iter(self.summary))
        return self.summary[class_name][metric].mean


def _ttest_dict(r: TTestResult):
    return {"t": None if math.isnan(r.t) else r.t, "p": r.p, "n": r.n, "degenerate": r.degenerate}


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def _order(cases):
    return sorted(cases, key=lambda c: (c.subject_id, c.class_name))


def aggregate(cases: Sequence[CaseMetrics], baseline: Optional[Sequence[CaseMetrics]] = None
              ) -> CohortReport:
    """Mean and unbiased SD per class and metric; sentinel values are excluded and counted."""
    if not cases:
        raise ValueError("aggregate needs at least one case")
    cases = _order(cases)
    classes = sorted({c.class_name for c in cases}, key=[c.class_name for c in cases].index)
    summary = {}
    for cls in classes:
        rows = [c for c in cases if c.class_name == cls]
        summary[cls] = {}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in rows if not r.excluded(m)], dtype=np.float64)
            n = len(vals)
            mean = float(vals.mean()) if n else None
            sd = float(vals.std(ddof=1)) if n > 1 else (0.0 if n == 1 else None)
            summary[cls][m] = MetricSummary(mean, sd, n, len(rows) - n, n == 1)
    report = CohortReport(cases, summary)
    if baseline is not None:
        report.paired_tests = paired_tests(cases, baseline)
    return report


def paired_tests(cases, baseline) -> Dict[str, Dict[str, TTestResult]]:
    """Per class and metric, t-test over cases present (and non-sentinel) in both runs."""
    base = {(c.subject_id, c.class_name): c for c in baseline}
    out = {}
    for cls in sorted({c.class_name for c in cases}):
        out[cls] = {}
        for m in METRICS:
            a, b = [], []
            for c in _order(cases):
                ref = base.get((c.subject_id, cls))
                if c.class_name != cls or ref is None or c.excluded(m) or ref.excluded(m):
                    continue
                a.append(getattr(c, m))
                b.append(getattr(ref, m))
            if len(a) >= 2:
                out[cls][m] = paired_t_test(a, b)
    return out
