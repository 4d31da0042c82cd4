"""Dense stereo matching on rectified pairs.

The native matcher is census + semi-global aggregation + winner-take-all with
subpixel refinement. External matchers attach through
:mod:`satstereo.adapter`; their outputs are brought to the pipeline-canonical
sign convention by :func:`normalize_sign` and cross-checked with
:func:`lr_consistency_filter`.

Canonical sign convention: ``x_right = x_left + d``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RangeTooWide, SizeMismatch, WindowTooLarge

__all__ = [
    "SignConvention",
    "CANONICAL_CONVENTION",
    "SATURATED_COST",
    "MAX_RANGE_WIDTH",
    "MAX_CENSUS_WINDOW",
    "DisparityMap",
    "NativeMatcherSpec",
    "ExternalMatcherSpec",
    "census_transform",
    "compute_cost_volume",
    "sgm_aggregate",
    "wta_subpixel",
    "run_native_matcher",
    "normalize_sign",
    "lr_consistency_filter",
    "speckle_filter",
]


class SignConvention(enum.Enum):
    """Disparity sign semantics relating left and right column coordinates."""

    RIGHT_EQ_LEFT_PLUS_D = "right_eq_left_plus_d"
    RIGHT_EQ_LEFT_MINUS_D = "right_eq_left_minus_d"


CANONICAL_CONVENTION = SignConvention.RIGHT_EQ_LEFT_PLUS_D

# Cost assigned to disparity hypotheses that address columns outside the
# right image (or NaN no-data there). Any real census cost is at most
# window**2 - 1 <= 48, so 255 always loses.
SATURATED_COST = 255

# Widest allowed disparity search range, in integer steps dmax - dmin.
MAX_RANGE_WIDTH = 1024

# Census bitstrings are stored in uint64: window**2 - 1 <= 64 bits.
MAX_CENSUS_WINDOW = 7

_PATH_DIRECTIONS_4 = ((1, 0), (-1, 0), (0, 1), (0, -1))
_PATH_DIRECTIONS_8 = _PATH_DIRECTIONS_4 + ((1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass(frozen=True)
class DisparityMap:
    """Per-pixel disparity raster with validity mask and sign convention.

    Invalid pixels carry NaN in ``values``; ``valid`` is the boolean mask of
    finite pixels. ``convention`` records how a value maps left columns to
    right columns.
    """

    width: int
    height: int
    values: np.ndarray
    valid: np.ndarray
    convention: SignConvention

    def __post_init__(self) -> None:
        if self.values.shape != (self.height, self.width):
            raise ConfigError(
                f"values shape {self.values.shape} does not match "
                f"(height, width)=({self.height}, {self.width})")
        if self.valid.shape != self.values.shape:
            raise ConfigError("valid mask shape does not match values")
        if self.values.dtype != np.float32:
            object.__setattr__(self, "values",
                               self.values.astype(np.float32))
        # Normalize: invalid pixels carry NaN, non-finite pixels are invalid.
        valid = self.valid & np.isfinite(self.values)
        values = np.where(valid, self.values, np.float32(np.nan))
        object.__setattr__(self, "values", values.astype(np.float32))
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_values(cls, values: np.ndarray,
                    convention: SignConvention = CANONICAL_CONVENTION,
                    ) -> "DisparityMap":
        """Build a map from a raster; validity is derived from finiteness."""
        values = np.asarray(values, np.float32)
        h, w = values.shape
        return cls(w, h, values, np.isfinite(values), convention)

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean()) if self.valid.size else 0.0


@dataclass(frozen=True)
class NativeMatcherSpec:
    """Configuration of the built-in census/SGM matcher."""

    census_window: int = 5
    p1: float = 8.0
    p2: float = 96.0
    paths: int = 8
    uniqueness_ratio: float = 0.95

    def __post_init__(self) -> None:
        if self.census_window % 2 == 0 or self.census_window < 3:
            raise ConfigError(
                f"census_window must be odd and >= 3, got {self.census_window}")
        if not self.p1 < self.p2:
            raise ConfigError(f"requires p1 < p2, got p1={self.p1} p2={self.p2}")
        if self.paths not in (4, 8):
            raise ConfigError(f"paths must be 4 or 8, got {self.paths}")
        if not 0.0 <= self.uniqueness_ratio <= 1.0:
            raise ConfigError(
                f"uniqueness_ratio must be in [0, 1], got {self.uniqueness_ratio}")


@dataclass(frozen=True)
class ExternalMatcherSpec:
    """Configuration of an external matcher process.

    ``command`` is the executable plus argument template; tokens may contain
    the placeholders ``{left} {right} {dmin} {dmax} {out}``. If no
    placeholder appears, the five arguments are appended in that order.
    The adapter's sign convention is declared here, not negotiated.
    """

    command: tuple[str, ...]
    convention: SignConvention = CANONICAL_CONVENTION
    timeout: float = 600.0

    def __post_init__(self) -> None:
        if isinstance(self.command, str):
            import shlex

            object.__setattr__(self, "command",
                               tuple(shlex.split(self.command)))
        else:
            object.__setattr__(self, "command", tuple(self.command))
        if not self.command:
            raise ConfigError("external matcher command is empty")
        if self.timeout <= 0:
            raise ConfigError(f"timeout must be positive, got {self.timeout}")


def census_transform(img: np.ndarray, window: int) -> np.ndarray:
    """Census-transform an image into per-pixel uint64 bitstrings.

    Bit k is set iff the k-th window neighbor (row-major order, center
    skipped) is strictly darker than the center pixel. Borders compare
    against edge-replicated pixels. NaN pixels never compare darker, so
    they produce zero bits wherever they appear.

    Args:
        img: 2-D intensity raster.
        window: odd window side length, 3 <= window <= 7.

    Returns:
        uint64 raster of the same shape.

    Raises:
        WindowTooLarge: window > 7 (bitstring would exceed 64 bits).
        ConfigError: window even or < 3.
    """
    img = np.asarray(img, np.float64)
    if img.ndim != 2:
        raise ConfigError(f"census input must be 2-D, got shape {img.shape}")
    if window % 2 == 0 or window < 3:
        raise ConfigError(f"census window must be odd and >= 3, got {window}")
    if window > MAX_CENSUS_WINDOW:
        raise WindowTooLarge(
            f"census window {window} needs {window * window - 1} bits; "
            f"at most 64 are available (window <= {MAX_CENSUS_WINDOW})")
    r = window // 2
    pad = np.pad(img, r, mode="edge")
    h, w = img.shape
    out = np.zeros((h, w), np.uint64)
    bit = 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            neighbor = pad[r + dy:r + dy + h, r + dx:r + dx + w]
            darker = neighbor < img  # False wherever either side is NaN
            out |= darker.astype(np.uint64) << np.uint64(bit)
            bit += 1
    return out


def compute_cost_volume(census_left: np.ndarray, census_right: np.ndarray,
                        disp_min: int, disp_max: int,
                        invalid_right: np.ndarray | None = None) -> np.ndarray:
    """Hamming-distance cost volume over an integer disparity range.

    ``cost[y, x, k]`` is the Hamming distance between ``census_left[y, x]``
    and ``census_right[y, x + disp_min + k]`` (canonical convention
    ``x_right = x_left + d``). Hypotheses that address columns outside the
    right image, or columns flagged in ``invalid_right``, receive the
    saturating cost :data:`SATURATED_COST`.

    Raises:
        RangeTooWide: disp_max - disp_min > 1024.
        ConfigError: inverted range or mismatched census shapes.
    """
    if census_left.shape != census_right.shape:
        raise ConfigError("census rasters must share a shape")
    if disp_min > disp_max:
        raise ConfigError(f"inverted disparity range [{disp_min}, {disp_max}]")
    if disp_max - disp_min > MAX_RANGE_WIDTH:
        raise RangeTooWide(
            f"disparity range width {disp_max - disp_min} exceeds "
            f"{MAX_RANGE_WIDTH}")
    h, w = census_left.shape
    n = disp_max - disp_min + 1
    out = np.full((h, w, n), SATURATED_COST, np.uint8)
    for k in range(n):
        d = disp_min + k
        lo = max(0, -d)
        hi = min(w, w - d)
        if lo >= hi:
            continue
        xor = census_left[:, lo:hi] ^ census_right[:, lo + d:hi + d]
        plane = np.bitwise_count(xor).astype(np.uint8)
        if invalid_right is not None:
            plane = np.where(invalid_right[:, lo + d:hi + d],
                             np.uint8(SATURATED_COST), plane)
        out[:, lo:hi, k] = plane
    return out


_INT_SENTINEL = np.int32(2 ** 30)


def _sgm_step(cost_slab: np.ndarray, prev: np.ndarray, p1, p2,
              sentinel) -> np.ndarray:
    """One SGM recurrence step, vectorized over a line of pixels.

    ``prev`` holds L at each pixel's path predecessor, shape (n_pixels, D).
    """
    m = prev.min(axis=1, keepdims=True)
    up = np.full_like(prev, sentinel)
    up[:, 1:] = prev[:, :-1]
    down = np.full_like(prev, sentinel)
    down[:, :-1] = prev[:, 1:]
    best = np.minimum(np.minimum(prev, m + p2), np.minimum(up, down) + p1)
    return cost_slab + best - m


def _scan_vertical(cost: np.ndarray, p1, p2, dx: int, dy: int,
                   sentinel) -> np.ndarray:
    """Aggregate along a direction with dy != 0 (row-by-row sweep)."""
    h, w, _ = cost.shape
    out = np.empty_like(cost)
    rows = range(h) if dy > 0 else range(h - 1, -1, -1)
    first = True
    for y in rows:
        if first:
            out[y] = cost[y]
            first = False
            continue
        prev = out[y - dy]
        if dx == 0:
            out[y] = _sgm_step(cost[y], prev, p1, p2, sentinel)
        else:
            shifted = np.full_like(prev, sentinel)
            if dx > 0:
                shifted[dx:] = prev[:-dx]
            else:
                shifted[:dx] = prev[-dx:]
            stepped = _sgm_step(cost[y], shifted, p1, p2, sentinel)
            # Columns whose predecessor falls outside the image start fresh.
            if dx > 0:
                stepped[:dx] = cost[y, :dx]
            else:
                stepped[dx:] = cost[y, dx:]
            out[y] = stepped
    return out


def _scan_horizontal(cost: np.ndarray, p1, p2, dx: int, sentinel) -> np.ndarray:
    """Aggregate along a purely horizontal direction (column sweep)."""
    h, w, _ = cost.shape
    out = np.empty_like(cost)
    cols = range(w) if dx > 0 else range(w - 1, -1, -1)
    first = True
    for x in cols:
        if first:
            out[:, x] = cost[:, x]
            first = False
            continue
        out[:, x] = _sgm_step(cost[:, x], out[:, x - dx], p1, p2, sentinel)
    return out


def sgm_aggregate(cost: np.ndarray, p1: float = 8.0, p2: float = 96.0,
                  paths: int = 8,
                  directions: tuple[tuple[int, int], ...] | None = None,
                  ) -> np.ndarray:
    """Semi-global aggregation of a cost volume.

    For each path direction r the recurrence is
    ``L_r(p, d) = C(p, d) + min(L_r(p-r, d), L_r(p-r, d+-1) + p1,
    min_k L_r(p-r, k) + p2) - min_k L_r(p-r, k)``, with ``L_r = C`` at the
    first pixel of each path; the result sums L_r over the 4 or 8 canonical
    directions. Integer penalties aggregate in exact integer arithmetic.

    Args:
        cost: (h, w, d) cost volume.
        p1: small-jump penalty (|Δd| = 1).
        p2: large-jump penalty; must satisfy p1 <= p2.
        paths: 4 (axis-aligned) or 8 (plus diagonals); ignored when
            ``directions`` is given.
        directions: optional explicit (dx, dy) path set, e.g. ``((1, 0),)``
            for a single left-to-right pass.

    Returns:
        Aggregated volume, int64 for integer penalties else float64.
    """
    cost = np.asarray(cost)
    if cost.ndim != 3:
        raise ConfigError(f"cost volume must be 3-D, got shape {cost.shape}")
    if p1 > p2:
        raise ConfigError(f"requires p1 <= p2, got p1={p1} p2={p2}")
    if directions is None:
        if paths == 4:
            directions = _PATH_DIRECTIONS_4
        elif paths == 8:
            directions = _PATH_DIRECTIONS_8
        else:
            raise ConfigError(f"paths must be 4 or 8, got {paths}")
    integral = float(p1).is_integer() and float(p2).is_integer()
    if integral:
        work = cost.astype(np.int64)
        p1v, p2v = np.int64(p1), np.int64(p2)
        sentinel = np.int64(2 ** 40)
    else:
        work = cost.astype(np.float64)
        p1v, p2v = float(p1), float(p2)
        sentinel = np.float64(np.inf)
    total = np.zeros_like(work)
    for dx, dy in directions:
        if dx == 0 and dy == 0:
            raise ConfigError("path direction (0, 0) is not a path")
        if dy == 0:
            total += _scan_horizontal(work, p1v, p2v, dx, sentinel)
        else:
            total += _scan_vertical(work, p1v, p2v, dx, dy, sentinel)
    return total


def wta_subpixel(aggregated: np.ndarray, uniqueness_ratio: float = 0.95,
                 disp_min: int = 0) -> DisparityMap:
    """Winner-take-all with parabolic subpixel refinement.

    Per pixel the minimum-cost disparity index wins (ties toward smaller
    d); a parabola through the costs at (d*-1, d*, d*+1) refines it by an
    offset clamped to +-0.5 (no refinement at range edges). A pixel is
    invalidated when the best competitor outside d* +- 1 satisfies
    ``competitor * uniqueness_ratio <= best`` — flat cost rows have no
    unique winner and are always dropped.

    Args:
        aggregated: (h, w, d) cost volume.
        uniqueness_ratio: 0 disables the uniqueness check.
        disp_min: disparity value of plane 0.

    Returns:
        DisparityMap in the canonical convention.
    """
    agg = np.asarray(aggregated)
    h, w, n = agg.shape
    idx = agg.argmin(axis=2)
    best = np.take_along_axis(agg, idx[..., None], axis=2)[..., 0]
    values = (disp_min + idx).astype(np.float64)
    valid = np.ones((h, w), bool)

    if n >= 3:
        interior = (idx >= 1) & (idx <= n - 2)
        lo = np.clip(idx - 1, 0, n - 1)
        hi = np.clip(idx + 1, 0, n - 1)
        c_minus = np.take_along_axis(agg, lo[..., None], axis=2)[..., 0]
        c_plus = np.take_along_axis(agg, hi[..., None], axis=2)[..., 0]
        denom = (c_minus + c_plus - 2 * best).astype(np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            offset = (c_minus - c_plus).astype(np.float64) / (2.0 * denom)
        offset = np.where(interior & (denom > 0), offset, 0.0)
        values += np.clip(offset, -0.5, 0.5)

    if uniqueness_ratio > 0.0 and n > 3:
        planes = np.arange(n)
        near = np.abs(planes[None, None, :] - idx[..., None]) <= 1
        competitors = np.where(near, np.asarray(agg).max() + 1, agg)
        has_comp = (~near).any(axis=2)
        second = competitors.min(axis=2)
        lose = has_comp & (second * uniqueness_ratio <= best)
        valid &= ~lose
    elif uniqueness_ratio > 0.0 and n <= 3 and n > 1:
        # No competitor exists outside d* +- 1; only perfectly flat rows
        # can be rejected (no unique winner at all).
        flat = (agg.max(axis=2) == agg.min(axis=2))
        valid &= ~flat
    elif uniqueness_ratio > 0.0 and n == 1:
        pass

    values = np.where(valid, values, np.nan).astype(np.float32)
    return DisparityMap(w, h, values, valid, CANONICAL_CONVENTION)


def _dilate_mask(mask: np.ndarray, window: int) -> np.ndarray:
    """Grow a boolean mask by the census window footprint."""
    from scipy.ndimage import maximum_filter

    if not mask.any():
        return mask
    return maximum_filter(mask, size=window, mode="constant", cval=False)


def run_native_matcher(spec: NativeMatcherSpec, rect_left: np.ndarray,
                       rect_right: np.ndarray, disp_min: float,
                       disp_max: float) -> DisparityMap:
    """Census -> cost volume -> SGM -> winner-take-all, canonical output.

    The float search range widens to integers (floor, ceil). NaN no-data
    pixels are handled on both sides: hypotheses that look up a NaN
    neighborhood in the right image cost :data:`SATURATED_COST`, and left
    pixels whose census window touches NaN are invalidated in the output.

    Args:
        spec: native matcher configuration.
        rect_left, rect_right: rectified intensity rasters (same shape).
        disp_min, disp_max: disparity search range, canonical convention.

    Returns:
        DisparityMap in the canonical convention.
    """
    rect_left = np.asarray(rect_left, np.float64)
    rect_right = np.asarray(rect_right, np.float64)
    if rect_left.shape != rect_right.shape:
        raise SizeMismatch(
            f"rectified shapes differ: {rect_left.shape} vs {rect_right.shape}")
    dmin = int(math.floor(disp_min))
    dmax = int(math.ceil(disp_max))

    nan_left = _dilate_mask(~np.isfinite(rect_left), spec.census_window)
    nan_right = _dilate_mask(~np.isfinite(rect_right), spec.census_window)
    census_left = census_transform(np.nan_to_num(rect_left, nan=0.0),
                                   spec.census_window)
    census_right = census_transform(np.nan_to_num(rect_right, nan=0.0),
                                    spec.census_window)
    cost = compute_cost_volume(census_left, census_right, dmin, dmax,
                               invalid_right=nan_right
                               if nan_right.any() else None)
    agg = sgm_aggregate(cost, spec.p1, spec.p2, spec.paths)
    disp = wta_subpixel(agg, spec.uniqueness_ratio, disp_min=dmin)
    # A pixel whose raw data term is flat carries no image evidence: its
    # winner is an artifact of smoothing penalties leaking along paths
    # (textureless areas would otherwise pass the uniqueness test with a
    # best cost of zero).
    no_evidence = cost.max(axis=2) == cost.min(axis=2)
    valid = disp.valid & ~no_evidence & ~nan_left
    values = np.where(valid, disp.values, np.float32(np.nan))
    return DisparityMap(disp.width, disp.height, values, valid,
                        disp.convention)


def normalize_sign(d: DisparityMap) -> DisparityMap:
    """Bring a disparity map to the canonical ``x_right = x_left + d``.

    Maps produced under ``x_right = x_left - d`` have their valid values
    negated; canonical input is returned unchanged.
    """
    if d.convention is CANONICAL_CONVENTION:
        return d
    return DisparityMap(d.width, d.height, -d.values, d.valid.copy(),
                        CANONICAL_CONVENTION)


def lr_consistency_filter(d_left: DisparityMap, d_right: DisparityMap,
                          thresh: float = 2.0) -> DisparityMap:
    """Invalidate left disparities that the reverse map does not confirm.

    ``d_right`` must come from a matcher run with the images swapped, so its
    values map right columns back to left columns under the same canonical
    formula. A valid left pixel p with disparity d survives iff
    q = round(p.col + d) lands inside the image, d_right(q) is valid, and
    |d(p) + d_right(q)| <= thresh.

    Raises:
        SizeMismatch: maps differ in size.
        ConfigError: either map is not in the canonical convention.
    """
    if (d_left.width, d_left.height) != (d_right.width, d_right.height):
        raise SizeMismatch(
            f"left {d_left.width}x{d_left.height} vs "
            f"right {d_right.width}x{d_right.height}")
    if (d_left.convention is not CANONICAL_CONVENTION
            or d_right.convention is not CANONICAL_CONVENTION):
        raise ConfigError("lr_consistency_filter requires canonical "
                          "convention on both maps; normalize_sign first")
    h, w = d_left.height, d_left.width
    cols = np.arange(w)[None, :]
    with np.errstate(invalid="ignore"):
        q = np.floor(cols + d_left.values + 0.5)
    q_ok = np.isfinite(q) & (q >= 0) & (q <= w - 1)
    qi = np.where(q_ok, q, 0).astype(np.int64)
    rows = np.arange(h)[:, None]
    reverse = d_right.values[rows, qi]
    reverse_ok = d_right.valid[rows, qi]
    with np.errstate(invalid="ignore"):
        consistent = np.abs(d_left.values + reverse) <= thresh
    valid = d_left.valid & q_ok & reverse_ok & consistent
    values = np.where(valid, d_left.values, np.float32(np.nan))
    return DisparityMap(w, h, values.astype(np.float32), valid,
                        CANONICAL_CONVENTION)


def speckle_filter(d: DisparityMap, max_diff: float = 1.0,
                   min_region_px: int = 50) -> DisparityMap:
    """Remove small connected blobs of mutually consistent disparity.

    Two 4-adjacent valid pixels join the same region when their disparities
    differ by at most ``max_diff``; regions smaller than ``min_region_px``
    pixels are invalidated. Off by default in the pipeline.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    h, w = d.height, d.width
    n = h * w
    flat_valid = d.valid.ravel()
    if not flat_valid.any():
        return d
    vals = d.values
    edges_r = []
    edges_c = []
    # Horizontal adjacencies.
    ok = d.valid[:, :-1] & d.valid[:, 1:]
    with np.errstate(invalid="ignore"):
        ok &= np.abs(vals[:, :-1] - vals[:, 1:]) <= max_diff
    yy, xx = np.nonzero(ok)
    edges_r.append(yy * w + xx)
    edges_c.append(yy * w + xx + 1)
    # Vertical adjacencies.
    ok = d.valid[:-1, :] & d.valid[1:, :]
    with np.errstate(invalid="ignore"):
        ok &= np.abs(vals[:-1, :] - vals[1:, :]) <= max_diff
    yy, xx = np.nonzero(ok)
    edges_r.append(yy * w + xx)
    edges_c.append((yy + 1) * w + xx)
    rows = np.concatenate(edges_r)
    cols = np.concatenate(edges_c)
    graph = coo_matrix((np.ones(rows.size, np.int8), (rows, cols)),
                       shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    # Count only valid pixels per component; invalid pixels are singletons.
    counts = np.bincount(labels[flat_valid], minlength=labels.max() + 1)
    keep = (counts[labels] >= min_region_px).reshape(h, w) & d.valid
    values = np.where(keep, d.values, np.float32(np.nan))
    return DisparityMap(w, h, values.astype(np.float32), keep, d.convention)
