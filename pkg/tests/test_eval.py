"""Tests for DSM-to-ground-truth alignment and error metrics.

The metric formulas are checked against a brute-force oracle that uses
plain Python sorting and arithmetic (no numpy order statistics).
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from satstereo.dsm import DEFAULT_NODATA, DsmGrid
from satstereo.errors import (
    ConfigError,
    EmptyField,
    EmptyGt,
    GridMismatch,
    InsufficientOverlap,
    NoOverlap,
)
from satstereo.evaluation import (
    NMAD_SCALE,
    ClassMap,
    ErrorField,
    MetricsReport,
    ScopeMetrics,
    aggregate_scenes,
    classwise_metrics,
    compute_metrics,
    planimetric_align,
    resample_to_gt,
    valid_fraction,
    vertical_align,
    vertical_align_scenes,
)


# ---------------------------------------------------------------------------
# Brute-force oracle (plain Python, independent sorting)
# ---------------------------------------------------------------------------


def _median_sorted(sorted_vals):
    n = len(sorted_vals)
    mid = n // 2
    if n % 2 == 1:
        return sorted_vals[mid]
    return 0.5 * (sorted_vals[mid - 1] + sorted_vals[mid])


def metrics_oracle(deltas):
    deltas = [float(v) for v in deltas]
    n = len(deltas)
    abs_sorted = sorted(abs(v) for v in deltas)
    mae = sum(abs_sorted) / n
    rmse = math.sqrt(sum(v * v for v in abs_sorted) / n)
    idx = 0.9 * (n - 1)
    lo = int(math.floor(idx))
    frac = idx - lo
    if lo >= n - 1:
        p90 = abs_sorted[-1]
    else:
        p90 = abs_sorted[lo] * (1.0 - frac) + abs_sorted[lo + 1] * frac
    med = _median_sorted(sorted(deltas))
    dev_sorted = sorted(abs(v - med) for v in deltas)
    nmad = 1.4826 * _median_sorted(dev_sorted)
    return p90, nmad, rmse, mae


# ---------------------------------------------------------------------------
# compute_metrics
# ---------------------------------------------------------------------------


def test_metrics_zero_field():
    m = compute_metrics(np.zeros(17))
    assert m.p90 == 0 and m.nmad == 0 and m.rmse == 0 and m.mae == 0


def test_metrics_worked_pair():
    m = compute_metrics(np.array([3.0, -4.0]))
    assert m.mae == pytest.approx(3.5, abs=1e-12)
    assert m.rmse == pytest.approx(math.sqrt(12.5), abs=1e-12)
    # |deltas| sorted = {3, 4}; index 0.9*(2-1) = 0.9 -> 3 + 0.9*(4-3).
    assert m.p90 == pytest.approx(3.9, abs=1e-12)
    # median(deltas) = -0.5; |deltas + 0.5| = {3.5, 3.5}.
    assert m.nmad == pytest.approx(1.4826 * 3.5, abs=1e-12)
    assert m.nmad == pytest.approx(5.1891, abs=1e-4)
    assert NMAD_SCALE == 1.4826


def test_metrics_outlier_robustness():
    m = compute_metrics(np.array([1.0, 2.0, 3.0, 4.0, 100.0]))
    assert m.nmad == pytest.approx(1.4826, abs=1e-12)
    assert m.mae == pytest.approx(22.0, abs=1e-12)
    assert m.nmad < m.mae


def test_metrics_match_bruteforce_oracle_on_random_fields():
    rng = np.random.default_rng(31)
    for trial in range(1000):
        n = int(rng.integers(1, 51))
        scale = float(rng.uniform(0.1, 50.0))
        deltas = rng.normal(rng.uniform(-5, 5), scale, n)
        if trial % 7 == 0:
            deltas = np.round(deltas)  # force ties
        got = compute_metrics(deltas)
        want = metrics_oracle(deltas)
        for g, w in zip(got, want):
            assert g == pytest.approx(w, rel=1e-9, abs=1e-12)


def test_metrics_empty_field_raises():
    with pytest.raises(EmptyField):
        compute_metrics(np.array([]))
    with pytest.raises(EmptyField):
        compute_metrics(np.array([np.nan, np.nan]))


def test_metrics_accepts_error_field():
    errors = np.array([[3.0, -4.0], [99.0, 99.0]])
    mask = np.array([[True, True], [False, False]])
    field = ErrorField(errors=errors, mask=mask, gt_valid_count=4)
    m = compute_metrics(field)
    assert m.mae == pytest.approx(3.5)


def test_nmad_invariant_under_constant_shift_mae_rmse_not():
    rng = np.random.default_rng(37)
    d = rng.normal(0.0, 2.0, 400)
    m0 = compute_metrics(d)
    m1 = compute_metrics(d + 7.5)
    assert m1.nmad == pytest.approx(m0.nmad, rel=1e-9)
    assert m1.mae > m0.mae + 1.0
    assert m1.rmse > m0.rmse + 1.0


def test_p90_shifts_with_positive_constant_on_abs_values():
    rng = np.random.default_rng(41)
    a = np.abs(rng.normal(0.0, 3.0, 257))
    for c in (0.5, 2.0, 10.0):
        m0 = compute_metrics(a)
        m1 = compute_metrics(a + c)
        assert m1.p90 == pytest.approx(m0.p90 + c, rel=1e-9)
        assert m1.p90 > m0.p90


# ---------------------------------------------------------------------------
# ErrorField / grids plumbing
# ---------------------------------------------------------------------------


def _grid(values, origin_e=0.0, origin_n=100.0, cell=0.5, crs="21S"):
    values = np.asarray(values, np.float32)
    h, w = values.shape
    return DsmGrid(origin_e=origin_e, origin_n=origin_n, cell=cell,
                   width=w, height=h, values=values, nodata=DEFAULT_NODATA,
                   crs=crs)


def test_error_field_from_grids():
    gt = _grid([[1.0, 2.0], [np.nan, 4.0]])
    dsm = _grid([[1.5, np.nan], [3.0, 4.25]])
    field = ErrorField.from_grids(dsm, gt)
    assert field.gt_valid_count == 3
    assert field.mask.tolist() == [[True, False], [False, True]]
    assert field.errors[0, 0] == pytest.approx(0.5)
    assert field.errors[1, 1] == pytest.approx(0.25)
    assert np.isnan(field.errors[0, 1]) and np.isnan(field.errors[1, 0])


def test_error_field_grid_mismatch():
    gt = _grid(np.zeros((2, 2)))
    with pytest.raises(GridMismatch):
        ErrorField.from_grids(_grid(np.zeros((2, 2)), origin_e=5.25), gt)
    with pytest.raises(GridMismatch):
        ErrorField.from_grids(_grid(np.zeros((3, 2))), gt)


# ---------------------------------------------------------------------------
# resample_to_gt
# ---------------------------------------------------------------------------


def test_resample_identity_bit_exact():
    rng = np.random.default_rng(43)
    vals = rng.normal(10, 3, (5, 6)).astype(np.float32)
    vals[2, 2] = np.nan
    dsm = _grid(vals)
    gt = _grid(np.zeros((5, 6)))
    out = resample_to_gt(dsm, gt)
    assert np.array_equal(out.values, vals, equal_nan=True)
    assert out.origin_e == gt.origin_e and out.origin_n == gt.origin_n


def test_resample_one_cell_shift():
    vals = np.arange(12, dtype=np.float32).reshape(3, 4)
    dsm = _grid(vals, origin_e=0.5)         # one 0.5 m cell east of GT
    gt = _grid(np.zeros((3, 4)), origin_e=0.0)
    out = resample_to_gt(dsm, gt)
    assert np.all(np.isnan(out.values[:, 0]))
    assert np.array_equal(out.values[:, 1:], vals[:, :3])


def test_resample_coarse_to_fine_replicates_2x2():
    vals = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    dsm = _grid(vals, origin_e=0.0, origin_n=2.0, cell=1.0)
    gt = _grid(np.zeros((4, 4)), origin_e=0.0, origin_n=2.0, cell=0.5)
    out = resample_to_gt(dsm, gt)
    want = np.array([[1, 1, 2, 2], [1, 1, 2, 2],
                     [3, 3, 4, 4], [3, 3, 4, 4]], np.float32)
    assert np.array_equal(out.values, want)


def test_resample_no_overlap():
    dsm = _grid(np.zeros((2, 2)), origin_e=0.0, origin_n=100.0)
    gt = _grid(np.zeros((2, 2)), origin_e=500.0, origin_n=100.0)
    with pytest.raises(NoOverlap):
        resample_to_gt(dsm, gt)


def test_resample_crs_mismatch():
    dsm = _grid(np.zeros((2, 2)), crs="21S")
    gt = _grid(np.zeros((2, 2)), crs="22S")
    with pytest.raises(GridMismatch):
        resample_to_gt(dsm, gt)


# ---------------------------------------------------------------------------
# vertical_align
# ---------------------------------------------------------------------------


def test_vertical_align_constant_bias():
    rng = np.random.default_rng(47)
    gt_vals = rng.normal(30, 5, (12, 12)).astype(np.float32)
    gt = _grid(gt_vals)
    dsm = _grid(gt_vals + np.float32(3.2))
    aligned, offset = vertical_align(dsm, gt)
    assert offset == pytest.approx(3.2, abs=1e-5)
    assert np.allclose(aligned.values, gt.values, atol=1e-5)


def test_vertical_align_identity_unchanged():
    rng = np.random.default_rng(53)
    vals = rng.normal(30, 5, (12, 12)).astype(np.float32)
    gt = _grid(vals)
    dsm = _grid(vals.copy())
    aligned, offset = vertical_align(dsm, gt)
    assert offset == 0.0
    assert np.array_equal(aligned.values, vals)


def test_vertical_align_median_offset_then_mae():
    # The error multiset {-1, 0, 0, 0, 10} tiled 20x keeps its median (0)
    # and MAE (2.2) while meeting the 100-cell minimum.
    base = np.array([-1.0, 0.0, 0.0, 0.0, 10.0])
    errors = np.tile(base, 20).reshape(10, 10)
    gt = _grid(np.zeros((10, 10)))
    dsm = _grid(errors)
    aligned, offset = vertical_align(dsm, gt)
    assert offset == 0.0
    m = compute_metrics(ErrorField.from_grids(aligned, gt))
    assert m.mae == pytest.approx(2.2, abs=1e-6)


def test_vertical_align_zeroes_error_median():
    rng = np.random.default_rng(59)
    gt = _grid(rng.normal(0, 10, (20, 20)).astype(np.float32))
    dsm = _grid(gt.values + rng.gamma(2.0, 2.0, (20, 20)).astype(np.float32))
    aligned, offset = vertical_align(dsm, gt)
    residual = (aligned.values.astype(np.float64)
                - gt.values.astype(np.float64))
    assert abs(np.median(residual)) < 1e-9


def test_vertical_align_insufficient_overlap():
    vals = np.full((12, 12), np.nan, np.float32)
    vals[:9, :11] = 5.0  # 99 jointly valid cells
    gt = _grid(np.zeros((12, 12)))
    with pytest.raises(InsufficientOverlap):
        vertical_align(_grid(vals), gt)
    vals[9, 0] = 5.0  # 100th cell
    aligned, offset = vertical_align(_grid(vals), gt)
    assert offset == 5.0


def test_vertical_align_cross_scene_pools_one_offset():
    gt_a = _grid(np.zeros((20, 15)))                   # 300 cells
    gt_b = _grid(np.zeros((10, 10)))                   # 100 cells
    dsm_a = _grid(np.full((20, 15), 2.0))
    dsm_b = _grid(np.full((10, 10), 6.0))
    aligned, offset = vertical_align_scenes([(dsm_a, gt_a), (dsm_b, gt_b)])
    # Pooled median over {2.0 x300, 6.0 x100} is 2.0, applied to both.
    assert offset == 2.0
    assert np.allclose(aligned[0].values, 0.0)
    assert np.allclose(aligned[1].values, 4.0)


def test_vertical_align_cross_scene_insufficient_pooled():
    gt = _grid(np.zeros((7, 7)))
    dsm = _grid(np.full((7, 7), 1.0))
    with pytest.raises(InsufficientOverlap):
        vertical_align_scenes([(dsm, gt), (dsm, gt)])  # 98 pooled cells


# ---------------------------------------------------------------------------
# valid_fraction
# ---------------------------------------------------------------------------


def test_valid_fraction_full_and_empty():
    gt = _grid(np.ones((10, 10)))
    assert valid_fraction(_grid(np.ones((10, 10))), gt) == 100.0
    assert valid_fraction(_grid(np.full((10, 10), np.nan)), gt) == 0.0


def test_valid_fraction_gt_denominator_rule():
    gt_vals = np.full((40, 30), np.nan, np.float32)
    gt_vals.ravel()[:1000] = 1.0          # 1000 GT-valid cells
    dsm_vals = np.full((40, 30), np.nan, np.float32)
    dsm_vals.ravel()[:785] = 2.0          # 785 on GT-valid cells
    dsm_vals.ravel()[1000:1050] = 2.0     # 50 where GT is nodata
    pct = valid_fraction(_grid(dsm_vals), _grid(gt_vals))
    assert pct == pytest.approx(78.5, abs=1e-12)


def test_valid_fraction_empty_gt():
    gt = _grid(np.full((4, 4), np.nan))
    with pytest.raises(EmptyGt):
        valid_fraction(_grid(np.ones((4, 4))), gt)


# ---------------------------------------------------------------------------
# classwise_metrics
# ---------------------------------------------------------------------------


GRSS_NAMES = {2: "Ground", 5: "Tree", 6: "Roof", 9: "Water"}
AGG = {"All Except Vegetation and Water": frozenset({5, 9})}


def test_classwise_single_class_equals_overall():
    rng = np.random.default_rng(61)
    errors = rng.normal(0, 1, (8, 8))
    field = ErrorField(errors=errors, mask=np.ones((8, 8), bool),
                       gt_valid_count=64)
    cm = ClassMap(raster=np.full((8, 8), 2, np.int32), names=GRSS_NAMES)
    report = classwise_metrics(field, cm)
    overall = report.scopes["Overall"]
    ground = report.scopes["Ground"]
    assert ground.p90 == overall.p90
    assert ground.nmad == overall.nmad
    assert ground.rmse == overall.rmse
    assert ground.mae == overall.mae
    assert ground.n_cells == overall.n_cells == 64


def test_classwise_constant_fields():
    errors = np.zeros((4, 8))
    errors[:, 4:] = 5.0
    raster = np.full((4, 8), 2, np.int32)
    raster[:, 4:] = 6
    field = ErrorField(errors=errors, mask=np.ones((4, 8), bool),
                       gt_valid_count=32)
    report = classwise_metrics(field, ClassMap(raster=raster,
                                               names=GRSS_NAMES))
    a = report.scopes["Ground"]
    assert (a.p90, a.nmad, a.rmse, a.mae) == (0, 0, 0, 0)
    b = report.scopes["Roof"]
    assert b.mae == 5.0 and b.rmse == 5.0 and b.p90 == 5.0 and b.nmad == 0.0


def test_classwise_aggregate_matches_bruteforce_complement():
    rng = np.random.default_rng(67)
    errors = rng.normal(1.0, 4.0, (16, 16))
    mask = rng.random((16, 16)) < 0.8
    raster = rng.choice([2, 5, 6, 9], size=(16, 16)).astype(np.int32)
    field = ErrorField(errors=np.where(mask, errors, np.nan), mask=mask,
                       gt_valid_count=int(mask.sum()) + 3)
    report = classwise_metrics(field, ClassMap(raster=raster,
                                               names=GRSS_NAMES,
                                               aggregates=AGG))
    kept = []
    for i in range(16):
        for j in range(16):
            if mask[i, j] and raster[i, j] not in (5, 9):
                kept.append(float(errors[i, j]))
    want = metrics_oracle(kept)
    got = report.scopes["All Except Vegetation and Water"]
    assert got.n_cells == len(kept)
    for g, w in zip((got.p90, got.nmad, got.rmse, got.mae), want):
        assert g == pytest.approx(w, rel=1e-9)


def test_classwise_partition_counts_sum_to_overall():
    rng = np.random.default_rng(71)
    mask = rng.random((12, 12)) < 0.7
    errors = np.where(mask, rng.normal(0, 1, (12, 12)), np.nan)
    raster = rng.choice([2, 5, 6, 9], size=(12, 12)).astype(np.int32)
    field = ErrorField(errors=errors, mask=mask,
                       gt_valid_count=int(mask.sum()))
    report = classwise_metrics(field, ClassMap(raster=raster,
                                               names=GRSS_NAMES))
    class_total = sum(report.scopes[name].n_cells
                      for name in GRSS_NAMES.values()
                      if name in report.scopes)
    assert class_total == report.scopes["Overall"].n_cells


def test_classwise_empty_class_absent():
    errors = np.ones((4, 4))
    mask = np.ones((4, 4), bool)
    mask[:2] = False
    raster = np.full((4, 4), 2, np.int32)
    raster[:2] = 9          # Water exists only where the mask is invalid
    field = ErrorField(errors=np.where(mask, errors, np.nan), mask=mask,
                       gt_valid_count=16)
    report = classwise_metrics(field, ClassMap(raster=raster,
                                               names=GRSS_NAMES))
    assert "Water" not in report.scopes
    assert "Ground" in report.scopes


def test_classwise_unmapped_ids_bucketed_as_unlabeled():
    raster = np.full((4, 4), 77, np.int32)
    field = ErrorField(errors=np.ones((4, 4)), mask=np.ones((4, 4), bool),
                       gt_valid_count=16)
    report = classwise_metrics(field, ClassMap(raster=raster,
                                               names=GRSS_NAMES))
    assert "Unlabeled" in report.scopes
    assert report.scopes["Unlabeled"].n_cells == 16


def test_classwise_valid_pct_per_scope():
    mask = np.zeros((4, 4), bool)
    mask[0] = True                       # 4 jointly valid cells, all Ground
    gt_valid = np.ones((4, 4), bool)     # 16 GT-valid cells
    raster = np.full((4, 4), 2, np.int32)
    field = ErrorField(errors=np.where(mask, 1.0, np.nan), mask=mask,
                       gt_valid_count=16)
    report = classwise_metrics(field, ClassMap(raster=raster,
                                               names=GRSS_NAMES),
                               gt_valid=gt_valid)
    assert report.scopes["Overall"].valid_pct == pytest.approx(25.0)
    assert report.scopes["Ground"].valid_pct == pytest.approx(25.0)


def test_scope_metrics_validation():
    with pytest.raises(ConfigError):
        ScopeMetrics(p90=-1.0, nmad=0.0, rmse=0.0, mae=0.0, n_cells=5)
    with pytest.raises(ConfigError):
        ScopeMetrics(p90=0.0, nmad=0.0, rmse=0.0, mae=0.0, n_cells=0)
    with pytest.raises(ConfigError):
        ScopeMetrics(p90=0.0, nmad=0.0, rmse=0.0, mae=0.0, n_cells=5,
                     valid_pct=120.0)


# ---------------------------------------------------------------------------
# aggregate_scenes
# ---------------------------------------------------------------------------


def _report(mae, scene, scopes=("Overall",), valid_pct=None):
    return MetricsReport(
        scopes={name: ScopeMetrics(p90=2 * mae, nmad=mae / 2, rmse=1.5 * mae,
                                   mae=mae, n_cells=100, valid_pct=valid_pct)
                for name in scopes},
        offset=0.0, scene=scene)


def test_aggregate_single_scene():
    summary = aggregate_scenes([_report(2.0, "a")])
    entry = summary["Overall"]["mae"]
    assert entry.mean == 2.0 and entry.std == 0.0 and entry.n == 1


def test_aggregate_two_scenes_mean_std():
    summary = aggregate_scenes([_report(2.0, "a"), _report(4.0, "b")])
    entry = summary["Overall"]["mae"]
    assert entry.mean == pytest.approx(3.0, abs=1e-12)
    assert entry.std == pytest.approx(math.sqrt(2.0), abs=1e-12)
    assert f"{entry.mean:.2f} ± {entry.std:.2f}" == "3.00 ± 1.41"
    assert entry.n == 2


def test_aggregate_scope_absent_in_one_scene():
    reports = [_report(1.0, "a", scopes=("Overall", "Roof")),
               _report(3.0, "b", scopes=("Overall", "Roof")),
               _report(9.0, "c", scopes=("Overall",))]
    summary = aggregate_scenes(reports)
    assert summary["Overall"]["mae"].n == 3
    roof = summary["Roof"]["mae"]
    assert roof.n == 2
    assert roof.mean == pytest.approx(2.0)


def test_aggregate_valid_pct_only_where_present():
    reports = [_report(1.0, "a", valid_pct=80.0),
               _report(3.0, "b", valid_pct=90.0)]
    summary = aggregate_scenes(reports)
    entry = summary["Overall"]["valid_pct"]
    assert entry.mean == pytest.approx(85.0) and entry.n == 2
    summary2 = aggregate_scenes([_report(1.0, "a")])
    assert "valid_pct" not in summary2["Overall"]


def test_aggregate_requires_reports():
    with pytest.raises(ConfigError):
        aggregate_scenes([])


# ---------------------------------------------------------------------------
# Optional planimetric alignment (off by default in the pipeline)
# ---------------------------------------------------------------------------


def _smooth_field(shape, seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    out = np.zeros(shape)
    for _ in range(6):
        fy, fx = rng.uniform(0.02, 0.2, 2)
        ph = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.5, 2.0) * np.sin(fy * yy + fx * xx + ph)
    return out.astype(np.float32)


def test_planimetric_align_recovers_known_shift():
    base = _smooth_field((40, 40), seed=73)
    gt = _grid(base[2:-2, 2:-2])
    shifted = base[1:-3, 4:]   # dsm cell (i, j) holds base[i + 1, j + 4]
    dsm = _grid(shifted)
    aligned, (di, dj) = planimetric_align(dsm, gt, radius_cells=2)
    assert (di, dj) == (1, -2)
    inner = np.s_[3:-3, 3:-3]
    assert np.allclose(aligned.values[inner], gt.values[inner], atol=1e-5)


def test_planimetric_align_zero_for_identical():
    base = _smooth_field((30, 30), seed=79)
    gt = _grid(base)
    dsm = _grid(base.copy())
    aligned, shift = planimetric_align(dsm, gt, radius_cells=2)
    assert shift == (0, 0)
    assert np.array_equal(aligned.values, base)
