"""DSM-to-ground-truth alignment and error metrics.

Aligns reconstructed DSMs to a ground-truth grid (nearest-neighbor
resampling plus a median vertical offset; a shared offset can be pooled
across scenes), then computes elevation-error metrics — 90th percentile
of |error|, NMAD, RMSE, MAE and the fraction of ground-truth cells the
reconstruction covers — overall and restricted to semantic classes, and
summarizes multiple scenes as mean +/- sample standard deviation.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dsm import DsmGrid
from .errors import (
    ConfigError,
    EmptyField,
    EmptyGt,
    GridMismatch,
    InsufficientOverlap,
    NoOverlap,
)

# Scale factor making the median absolute deviation a consistent estimator
# of the standard deviation under a normal error model.
NMAD_SCALE = 1.4826
# Minimum jointly valid cells required to estimate a vertical offset.
DEFAULT_MIN_ALIGN_CELLS = 100
# Scope name for metrics over all jointly valid cells.
OVERALL_SCOPE = "Overall"


class Metrics(NamedTuple):
    """Error metrics over one set of signed elevation errors, meters."""

    p90: float
    nmad: float
    rmse: float
    mae: float


@dataclass(frozen=True, eq=False)
class ErrorField:
    """Per-cell signed elevation error (dsm - gt) with joint-validity mask.

    ``errors`` carries NaN outside ``mask``; ``gt_valid_count`` is the
    number of ground-truth-valid cells (the denominator of the valid
    fraction), of which the mask is a subset.
    """

    errors: np.ndarray
    mask: np.ndarray
    gt_valid_count: int

    def __post_init__(self) -> None:
        errors = np.asarray(self.errors, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if errors.shape != mask.shape:
            raise ConfigError(
                f"errors shape {errors.shape} does not match mask shape "
                f"{mask.shape}")
        mask = mask & np.isfinite(errors)
        errors = np.where(mask, errors, np.nan)
        object.__setattr__(self, "errors", errors)
        object.__setattr__(self, "mask", mask)
        if self.gt_valid_count < int(mask.sum()):
            raise ConfigError(
                f"gt_valid_count {self.gt_valid_count} is smaller than the "
                f"joint-validity count {int(mask.sum())}")

    @classmethod
    def from_grids(cls, dsm: DsmGrid, gt: DsmGrid) -> "ErrorField":
        """Signed error field between two grids on the same lattice."""
        _check_aligned(dsm, gt)
        mask = dsm.valid & gt.valid
        errors = dsm.values.astype(np.float64) - gt.values.astype(np.float64)
        return cls(errors=np.where(mask, errors, np.nan), mask=mask,
                   gt_valid_count=int(gt.valid.sum()))

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def valid_errors(self) -> np.ndarray:
        return self.errors[self.mask]


@dataclass(frozen=True, eq=False)
class ClassMap:
    """Integer class raster aligned to the ground-truth grid.

    ``names`` maps class ids to display names; ids present in the raster
    but absent from the mapping fall into the ``unlabeled`` bucket.
    ``aggregates`` maps an aggregate scope name to the set of class ids it
    EXCLUDES (e.g. "All Except Vegetation and Water" excludes the
    vegetation and water ids); its mask is the complement of those ids.
    """

    raster: np.ndarray
    names: Mapping[int, str]
    aggregates: Mapping[str, frozenset] = field(default_factory=dict)
    unlabeled: str = "Unlabeled"

    def __post_init__(self) -> None:
        raster = np.asarray(self.raster)
        if not np.issubdtype(raster.dtype, np.integer):
            raise ConfigError(
                f"class raster must be integer, got {raster.dtype}")
        object.__setattr__(self, "raster", raster)

    def scope_masks(self):
        """Yield (scope_name, mask) for classes, unlabeled ids, aggregates."""
        present = set(np.unique(self.raster).tolist())
        unlabeled_ids = sorted(present - set(self.names))
        for class_id, name in self.names.items():
            if class_id in present:
                yield name, self.raster == class_id
        if unlabeled_ids:
            yield self.unlabeled, np.isin(self.raster, unlabeled_ids)
        for name, excluded in self.aggregates.items():
            yield name, ~np.isin(self.raster, sorted(excluded))


@dataclass(frozen=True)
class ScopeMetrics:
    """Metrics of one scope (overall or one class) in one scene."""

    p90: float
    nmad: float
    rmse: float
    mae: float
    n_cells: int
    valid_pct: float | None = None

    def __post_init__(self) -> None:
        for name in ("p90", "nmad", "rmse", "mae"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got "
                                  f"{getattr(self, name)}")
        if self.n_cells < 1:
            raise ConfigError(
                "scopes with zero cells must be absent, not zero-filled")
        if self.valid_pct is not None and not 0.0 <= self.valid_pct <= 100.0:
            raise ConfigError(
                f"valid_pct must be in [0, 100], got {self.valid_pct}")

    def metric(self, name: str) -> float | None:
        return getattr(self, name)


@dataclass(frozen=True)
class MetricsReport:
    """All scope metrics of one scene plus the vertical offset applied."""

    scopes: Mapping[str, ScopeMetrics]
    offset: float
    scene: str = ""


@dataclass(frozen=True)
class AggregateEntry:
    """Cross-scene summary of one metric in one scope."""

    mean: float
    std: float
    n: int


METRIC_NAMES = ("p90", "nmad", "rmse", "mae", "valid_pct")


def _check_aligned(a: DsmGrid, b: DsmGrid) -> None:
    if a.crs != b.crs:
        raise GridMismatch(f"CRS differ: {a.crs!r} vs {b.crs!r}")
    if (a.cell != b.cell or a.origin_e != b.origin_e
            or a.origin_n != b.origin_n or a.width != b.width
            or a.height != b.height):
        raise GridMismatch(
            f"grids are not on the same lattice: "
            f"({a.origin_e}, {a.origin_n}, {a.cell}, {a.width}x{a.height}) vs "
            f"({b.origin_e}, {b.origin_n}, {b.cell}, {b.width}x{b.height})")


def resample_to_gt(dsm: DsmGrid, gt: DsmGrid) -> DsmGrid:
    """Nearest-neighbor resample of a DSM onto the ground-truth grid.

    Each ground-truth cell center looks up the DSM cell containing it;
    centers outside the DSM extent and nodata source cells come back as
    nodata.

    Raises:
        GridMismatch: the grids are in different UTM zones.
        NoOverlap: no ground-truth cell center falls inside the DSM.
    """
    if dsm.crs != gt.crs:
        raise GridMismatch(f"CRS differ: {dsm.crs!r} vs {gt.crs!r}")
    col = np.floor((gt.col_centers_e() - dsm.origin_e) / dsm.cell)
    row = np.floor((dsm.origin_n - gt.row_centers_n()) / dsm.cell)
    col_ok = (col >= 0) & (col < dsm.width)
    row_ok = (row >= 0) & (row < dsm.height)
    if not (np.any(col_ok) and np.any(row_ok)):
        raise NoOverlap("DSM and ground-truth extents do not overlap")
    values = np.full((gt.height, gt.width), np.nan, dtype=np.float32)
    rows = row[row_ok].astype(np.int64)
    cols = col[col_ok].astype(np.int64)
    values[np.ix_(row_ok, col_ok)] = dsm.values[np.ix_(rows, cols)]
    return DsmGrid(gt.origin_e, gt.origin_n, gt.cell, gt.width, gt.height,
                   values, nodata=dsm.nodata, crs=gt.crs)


def _shift_values(grid: DsmGrid, offset: float) -> DsmGrid:
    values = (grid.values.astype(np.float64) - offset).astype(np.float32)
    return DsmGrid(grid.origin_e, grid.origin_n, grid.cell, grid.width,
                   grid.height, values, nodata=grid.nodata, crs=grid.crs)


def vertical_align(dsm: DsmGrid, gt: DsmGrid,
                   min_cells: int = DEFAULT_MIN_ALIGN_CELLS):
    """Remove the median elevation bias of a DSM against ground truth.

    Returns:
        (aligned_dsm, offset): the DSM with ``offset`` subtracted, where
        offset = median(dsm - gt) over jointly valid cells.

    Raises:
        InsufficientOverlap: fewer than ``min_cells`` jointly valid cells.
    """
    fld = ErrorField.from_grids(dsm, gt)
    if fld.n_valid < min_cells:
        raise InsufficientOverlap(
            f"only {fld.n_valid} jointly valid cells; "
            f"need >= {min_cells} to estimate a vertical offset")
    offset = float(np.median(fld.valid_errors()))
    return _shift_values(dsm, offset), offset


def vertical_align_scenes(pairs, min_cells: int = DEFAULT_MIN_ALIGN_CELLS):
    """Estimate one shared vertical offset over several (dsm, gt) scenes.

    The median pools the errors of all scenes and the single offset is
    subtracted from every DSM, mirroring a per-method (not per-scene)
    bias correction.

    Returns:
        (aligned_dsms, offset).

    Raises:
        InsufficientOverlap: pooled jointly valid cells below ``min_cells``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("vertical_align_scenes requires at least one scene")
    pooled = np.concatenate(
        [ErrorField.from_grids(dsm, gt).valid_errors() for dsm, gt in pairs])
    if pooled.size < min_cells:
        raise InsufficientOverlap(
            f"only {pooled.size} pooled jointly valid cells; "
            f"need >= {min_cells} to estimate a vertical offset")
    offset = float(np.median(pooled))
    return [_shift_values(dsm, offset) for dsm, _ in pairs], offset


def compute_metrics(e) -> Metrics:
    """Error metrics over the valid signed errors.

    Accepts an ErrorField or any array of errors (NaN entries skipped).
    Over the valid errors D: mae = mean|D|; rmse = sqrt(mean D^2);
    p90 = 90th percentile of |D| with linear interpolation; nmad =
    1.4826 * median(|D - median(D)|).

    Raises:
        EmptyField: no valid errors.
    """
    if isinstance(e, ErrorField):
        data = e.valid_errors()
    else:
        arr = np.asarray(e, dtype=np.float64).ravel()
        data = arr[np.isfinite(arr)]
    if data.size == 0:
        raise EmptyField("no valid error cells to compute metrics over")
    data = data.astype(np.float64)
    magnitudes = np.abs(data)
    mae = float(np.mean(magnitudes))
    rmse = float(np.sqrt(np.mean(data * data)))
    p90 = float(np.percentile(magnitudes, 90.0))
    med = float(np.median(data))
    nmad = float(NMAD_SCALE * np.median(np.abs(data - med)))
    return Metrics(p90=p90, nmad=nmad, rmse=rmse, mae=mae)


def valid_fraction(dsm: DsmGrid, gt: DsmGrid) -> float:
    """Percentage of ground-truth-valid cells also valid in the DSM.

    Raises:
        GridMismatch: grids not on the same lattice.
        EmptyGt: ground truth has no valid cells.
    """
    _check_aligned(dsm, gt)
    gt_n = int(gt.valid.sum())
    if gt_n == 0:
        raise EmptyGt("ground truth has no valid cells")
    both = int((dsm.valid & gt.valid).sum())
    return 100.0 * both / gt_n


def _scope_metrics(errors, joint_mask, gt_valid, scope_mask) -> ScopeMetrics | None:
    mask = joint_mask if scope_mask is None else (joint_mask & scope_mask)
    n = int(mask.sum())
    if n == 0:
        return None
    m = compute_metrics(errors[mask])
    valid_pct = None
    if gt_valid is not None:
        denom = gt_valid if scope_mask is None else (gt_valid & scope_mask)
        denom_n = int(denom.sum())
        if denom_n > 0:
            valid_pct = 100.0 * n / denom_n
    return ScopeMetrics(p90=m.p90, nmad=m.nmad, rmse=m.rmse, mae=m.mae,
                        n_cells=n, valid_pct=valid_pct)


def classwise_metrics(e: ErrorField, cm: ClassMap | None = None, *,
                      gt_valid: np.ndarray | None = None,
                      offset: float = 0.0, scene: str = "") -> MetricsReport:
    """Metrics overall and restricted to each class and aggregate scope.

    Scopes with zero jointly valid cells are absent from the report.
    When the ground-truth validity raster is supplied, each scope also
    gets its valid percentage (joint cells over GT-valid cells in scope).
    """
    if cm is not None and cm.raster.shape != e.mask.shape:
        raise GridMismatch(
            f"class raster shape {cm.raster.shape} does not match the "
            f"error field shape {e.mask.shape}")
    if gt_valid is not None:
        gt_valid = np.asarray(gt_valid, dtype=bool)
        if gt_valid.shape != e.mask.shape:
            raise GridMismatch(
                f"gt_valid shape {gt_valid.shape} does not match the "
                f"error field shape {e.mask.shape}")
    scopes: dict[str, ScopeMetrics] = {}
    overall = _scope_metrics(e.errors, e.mask, gt_valid, None)
    if overall is not None:
        scopes[OVERALL_SCOPE] = overall
    if cm is not None:
        for name, scope_mask in cm.scope_masks():
            sm = _scope_metrics(e.errors, e.mask, gt_valid, scope_mask)
            if sm is not None:
                scopes[name] = sm
    return MetricsReport(scopes=scopes, offset=offset, scene=scene)


def aggregate_scenes(reports) -> dict:
    """Cross-scene mean +/- sample standard deviation per scope and metric.

    Each (scope, metric) aggregates over the scenes where the scope is
    present (and, for the valid percentage, where it was computed); the
    sample standard deviation uses the n-1 denominator and is 0 for a
    single scene.

    Returns:
        {scope: {metric: AggregateEntry}}.
    """
    reports = list(reports)
    if not reports:
        raise ConfigError("aggregate_scenes requires at least one report")
    scope_order: list[str] = []
    for report in reports:
        for name in report.scopes:
            if name not in scope_order:
                scope_order.append(name)
    summary: dict[str, dict[str, AggregateEntry]] = {}
    for name in scope_order:
        per_metric: dict[str, AggregateEntry] = {}
        for metric in METRIC_NAMES:
            values = [
                report.scopes[name].metric(metric)
                for report in reports
                if name in report.scopes
                and report.scopes[name].metric(metric) is not None
            ]
            if not values:
                continue
            arr = np.asarray(values, dtype=np.float64)
            std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
            per_metric[metric] = AggregateEntry(
                mean=float(np.mean(arr)), std=std, n=int(arr.size))
        summary[name] = per_metric
    return summary


def planimetric_align(dsm: DsmGrid, gt: DsmGrid, radius_cells: int = 2,
                      min_cells: int = DEFAULT_MIN_ALIGN_CELLS):
    """Optional integer-cell planimetric registration (off by default).

    Searches shifts within +/-radius_cells in both axes for the one
    minimizing the NMAD of the shifted errors; ties prefer the smallest
    displacement. Returns the shifted DSM and the chosen (di, dj), where
    the aligned cell (i, j) reads dsm cell (i + di, j + dj).

    Raises:
        InsufficientOverlap: no candidate shift leaves ``min_cells``
            jointly valid cells.
    """
    _check_aligned(dsm, gt)
    if radius_cells < 0:
        raise ConfigError(f"radius_cells must be >= 0, got {radius_cells}")
    gt64 = gt.values.astype(np.float64)
    best = None
    for di in range(-radius_cells, radius_cells + 1):
        for dj in range(-radius_cells, radius_cells + 1):
            shifted = _shift_raster(dsm.values, di, dj)
            diff = shifted.astype(np.float64) - gt64
            data = diff[np.isfinite(diff)]
            if data.size < min_cells:
                continue
            med = np.median(data)
            nmad = float(NMAD_SCALE * np.median(np.abs(data - med)))
            key = (nmad, abs(di) + abs(dj), di, dj)
            if best is None or key < best[0]:
                best = (key, (di, dj), shifted)
    if best is None:
        raise InsufficientOverlap(
            f"no shift within +/-{radius_cells} cells leaves >= {min_cells} "
            f"jointly valid cells")
    _, (di, dj), shifted = best
    out = DsmGrid(dsm.origin_e, dsm.origin_n, dsm.cell, dsm.width,
                  dsm.height, shifted, nodata=dsm.nodata, crs=dsm.crs)
    return out, (di, dj)


def _shift_raster(values: np.ndarray, di: int, dj: int) -> np.ndarray:
    """out[i, j] = values[i + di, j + dj], NaN where out of range."""
    h, w = values.shape
    out = np.full((h, w), np.nan, dtype=values.dtype)
    src_i = slice(max(di, 0), h + min(di, 0))
    dst_i = slice(max(-di, 0), h + min(-di, 0))
    src_j = slice(max(dj, 0), w + min(dj, 0))
    dst_j = slice(max(-dj, 0), w + min(-dj, 0))
    out[dst_i, dst_j] = values[src_i, src_j]
    return out
