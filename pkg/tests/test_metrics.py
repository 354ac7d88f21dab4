import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import oracles
from lesionseg.metrics import (AVD_SENTINEL, aggregate, avd, case_metrics, dsc, hd95,
                               lesion_f1, lesion_match, lesion_recall, paired_t_test, surface)

SPACINGS = [(1.0, 1.0, 1.0), (2.0, 0.5, 0.5), (3.0, 1.0, 0.25)]


def random_pair(seed, max_side=16):
    r = np.random.default_rng(seed)
    shape = tuple(int(v) for v in r.integers(2, max_side + 1, 3))
    density = r.uniform(0.02, 0.4)
    p = r.uniform(size=shape) < density
    g = r.uniform(size=shape) < density
    if r.uniform() < 0.1:
        p[:] = False
    if r.uniform() < 0.1:
        g[:] = False
    return p, g, SPACINGS[seed % len(SPACINGS)]


def test_dsc_examples():
    p = np.zeros((1, 2, 3), bool)
    g = p.copy()
    assert dsc(p, g) == 1.0
    p[0, 0, :3] = True
    g[0, :, 0] = True
    g[0, 1, 1] = True
    assert dsc(p, g) == pytest.approx(2 * 1 / (3 + 3))
    assert dsc(p, np.zeros_like(p)) == 0.0
    with pytest.raises(ValueError):
        dsc(p, np.zeros((2, 2, 2)))


def test_hd95_example():
    # two single voxels 5 mm apart along x
    p = np.zeros((1, 1, 8), bool)
    g = p.copy()
    p[0, 0, 1] = True
    g[0, 0, 6] = True
    assert hd95(p, g) == 5.0
    assert hd95(p, g, (1, 1, 0.5)) == 2.5


def test_hd95_sentinel_is_diagonal():
    p = np.zeros((4, 5, 6), bool)
    g = p.copy()
    g[1, 1, 1] = True
    assert hd95(p, g, (2, 1, 1)) == pytest.approx(math.sqrt(64 + 25 + 36))
    rows = case_metrics(p[None], g[None], (2, 1, 1), "s", ["lesion"])
    assert rows[0].hd95_sentinel and rows[0].excluded("hd95")


def test_avd_example_and_sentinel():
    g = np.zeros((2, 5, 5), bool)
    g[0, :2, :5] = True  # 10 voxels
    p = g.copy()
    p[1, 0, :3] = True  # 13 voxels
    assert avd(p, g) == pytest.approx(30.0)
    assert avd(p, np.zeros_like(g)) == AVD_SENTINEL


def test_lesion_f1_example():
    # 2 GT lesions, one detected, plus one false-positive component
    g = np.zeros((1, 9, 9), bool)
    g[0, 1, 1] = g[0, 7, 7] = True
    p = np.zeros_like(g)
    p[0, 1, 1] = p[0, 4, 4] = True
    counts = lesion_match(p, g)
    assert counts == (1, 1, 1)
    assert lesion_recall(counts) == 0.5
    assert lesion_f1(counts) == pytest.approx(0.5)
    p[0, 7, 7] = True
    assert lesion_f1(lesion_match(p, g)) == pytest.approx(2 * 2 / (4 + 1))


def test_lesion_connectivity_and_iou():
    g = np.zeros((1, 4, 4), bool)
    g[0, 0, 0] = g[0, 1, 1] = True  # diagonal neighbours
    assert lesion_match(g, g, 26) == (1, 0, 0)
    assert lesion_match(g, g, 6) == (2, 0, 0)
    big = np.zeros((1, 4, 4), bool)
    big[0] = True
    assert lesion_match(big, g, 26) == (1, 0, 0)
    assert lesion_match(big, g, 26, iou_threshold=0.5) == (0, 1, 1)


def test_metrics_match_oracles_on_50_pairs():
    for seed in range(50):
        p, g, sp = random_pair(seed)
        assert dsc(p, g) == pytest.approx(oracles.dsc(p, g), abs=1e-9)
        assert avd(p, g, sp) == pytest.approx(oracles.avd(p, g, sp), abs=1e-9)
        counts = lesion_match(p, g)
        assert counts == oracles.lesion_counts(p, g)
        assert lesion_recall(counts) == pytest.approx(
            counts[0] / (counts[0] + counts[2]) if counts[0] + counts[2] else
            (1.0 if counts[1] == 0 else 0.0), abs=1e-9)
        assert hd95(p, g, sp) == oracles.hd95(p, g, sp)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([6, 26]), st.sampled_from([None, 0.1, 0.5]))
def test_lesion_match_oracle_property(seed, conn, iou):
    p, g, _ = random_pair(seed, max_side=8)
    assert lesion_match(p, g, conn, iou) == oracles.lesion_counts(p, g, conn, iou)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_metric_properties(seed):
    p, g, sp = random_pair(seed, max_side=10)
    assert 0.0 <= dsc(p, g) <= 1.0
    assert dsc(p, g) == dsc(g, p)
    assert dsc(g, g) == 1.0
    assert hd95(p, g, sp) == hd95(g, p, sp)
    if g.any():
        assert hd95(g, g, sp) == 0.0
        assert avd(g, g, sp) == 0.0
    s = surface(p)
    assert not (s & ~p).any()


def test_paired_t_reference():
    a = [2, 4, 6, 8, 10]
    b = [1, 2, 3, 4, 5]  # differences 1..5
    r = paired_t_test(a, b)
    assert r.t == pytest.approx(4.2426, abs=1e-4)
    assert r.p == pytest.approx(0.0132, abs=1e-3)
    ref = stats.ttest_rel(a, b)
    assert r.t == pytest.approx(ref.statistic, rel=1e-12)
    assert r.p == pytest.approx(ref.pvalue, rel=1e-9)
    assert r.t == pytest.approx(oracles.t_test(a, b), rel=1e-12)


def test_paired_t_degenerate():
    r = paired_t_test([1, 2, 3], [1, 2, 3])
    assert r.degenerate and r.p == 1.0
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])


def _cases(values, cls="lesion", start=0):
    rows = []
    for i, v in enumerate(values):
        rows.append(case_metrics.__globals__["CaseMetrics"](
            f"s{i + start:02d}", cls, v, 1.0 + v, 10.0, 1.0, 1.0, 1, 0, 0))
    return rows


def test_aggregate_mean_sd_and_exclusions():
    rows = _cases([0.2, 0.4, 0.9])
    g = np.zeros((1, 2, 3, 3), bool)
    rows += case_metrics(g, g, (1, 1, 1), "s99", ["lesion"])
    rep = aggregate(rows)
    s = rep.summary["lesion"]
    assert s["dsc"].mean == pytest.approx(np.mean([0.2, 0.4, 0.9, 1.0]))
    assert s["dsc"].sd == pytest.approx(np.std([0.2, 0.4, 0.9, 1.0], ddof=1))
    assert s["hd95"].n == 3 and s["hd95"].excluded == 1
    assert s["avd"].n == 3 and s["avd"].excluded == 1
    one = aggregate(_cases([0.5]))
    assert one.summary["lesion"]["dsc"].single_case and one.summary["lesion"]["dsc"].sd == 0.0


def test_report_serialization_stable():
    rep = aggregate(_cases([0.3, 0.6]), baseline=_cases([0.1, 0.2]))
    again = aggregate(list(reversed(_cases([0.3, 0.6]))), baseline=_cases([0.1, 0.2]))
    assert rep.to_json() == again.to_json() and rep.to_csv() == again.to_csv()
    d = json.loads(rep.to_json())
    assert d["schema_version"] == 1
    assert "dsc" in d["paired_tests"]["lesion"]
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert [r["subject_id"] for r in rows] == ["s00", "s01"]
    assert float(rows[1]["dsc"]) == 0.6


def test_identical_baseline_flags_degenerate():
    rep = aggregate(_cases([0.3, 0.6, 0.7]), baseline=_cases([0.3, 0.6, 0.7]))
    r = rep.paired_tests["lesion"]["dsc"]
    assert r.degenerate and r.p == 1.0
    assert json.loads(rep.to_json())["paired_tests"]["lesion"]["dsc"]["t"] is None


def test_case_metrics_geometry_mismatch():
    with pytest.raises(ValueError, match="s1"):
        case_metrics(np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 3)), (1, 1, 1), "s1", ["lesion"])
