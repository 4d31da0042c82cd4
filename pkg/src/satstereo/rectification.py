"""Epipolar rectification with disparity-polarity and margin enforcement.

Rectifying transforms are affine: an affine fundamental matrix is fit to
RPC-driven virtual correspondences, the left image gets a pure rotation and
the right a rotation plus vertical scale/offset, optionally refined with a
horizontal shear that removes the row-trend of the disparities. Sparse
image matches then fix the disparity polarity: the right image is shifted so
the minimum polarity-oriented match disparity equals a safety margin, and
the search range is the match range plus a safety expansion. The chosen
polarity is cross-checked by projecting the ROI center at two altitudes; if
the disparity does not grow with altitude the opposite polarity is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    AltitudeInconsistent,
    ConfigError,
    DegenerateGeometry,
    FormatError,
    InsufficientCorrespondences,
    InsufficientMatches,
    ResidualTooLarge,
)
from .geometry import apply_homography, invert_homography

DEFAULT_GRID_N = 7
MIN_CORRESPONDENCES = 8
FIT_RESIDUAL_MAX_PX = 0.5
DEFAULT_MARGIN_PX = 50.0
RANGE_EXPANSION_FRACTION = 0.2
RANGE_EXPANSION_MIN_PX = 10.0
MATCH_ROW_TOL_PX = 2.0
MIN_SPARSE_MATCHES = 20
PATCH_RADIUS = 6  # 13x13 ZNCC patches


@dataclass(frozen=True)
class Roi:
    """Region of interest: lon/lat box plus a reference altitude range."""

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    alt_lo: float
    alt_hi: float

    def __post_init__(self):
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise ConfigError(
                f"empty ROI box lon [{self.lon_min}, {self.lon_max}] "
                f"lat [{self.lat_min}, {self.lat_max}]"
            )
        if not self.alt_lo < self.alt_hi:
            raise ConfigError(
                f"ROI altitude range [{self.alt_lo}, {self.alt_hi}] is empty"
            )

    @property
    def center(self):
        return (0.5 * (self.lon_min + self.lon_max),
                0.5 * (self.lat_min + self.lat_max))

    def corners(self):
        return [
            (self.lon_min, self.lat_min), (self.lon_min, self.lat_max),
            (self.lon_max, self.lat_min), (self.lon_max, self.lat_max),
        ]


@dataclass(frozen=True, eq=False)
class SparseMatch:
    """A sparse correspondence in the rectified frame."""

    col1: float
    row1: float
    col2: float
    row2: float
    score: float

    @property
    def disparity(self) -> float:
        return self.col2 - self.col1

    @property
    def row_residual(self) -> float:
        return self.row2 - self.row1


def match_disparities(matches) -> np.ndarray:
    return np.array([m.col2 - m.col1 for m in matches], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class RectifyingPair:
    """Rectifying homographies plus the enforced disparity range.

    The provenance fields (shear_applied, shift_applied, match_disparities)
    record what the builder did; match_disparities are the sparse-match
    disparities after the polarity shift and are what the range invariants
    are checked against.
    """

    h1: np.ndarray
    h2: np.ndarray
    disp_min: float
    disp_max: float
    polarity: int
    margin_applied: float
    out_width: int
    out_height: int
    shear_applied: float = 0.0
    shift_applied: float = 0.0
    match_disparities: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "h1", np.asarray(self.h1, dtype=np.float64))
        object.__setattr__(self, "h2", np.asarray(self.h2, dtype=np.float64))
        if self.polarity not in (1, -1):
            raise ConfigError(f"polarity must be +1 or -1, got {self.polarity}")

    def validate(self, rpc1=None, rpc2=None, roi=None):
        """Check the pair invariants; raises FormatError on violation."""
        pol = self.polarity
        if not (pol * self.disp_min >= 0 and pol * self.disp_max >= 0):
            raise FormatError(
                f"disparity range [{self.disp_min}, {self.disp_max}] is not "
                f"unipolar with polarity {pol:+d}"
            )
        near_zero = min(pol * self.disp_min, pol * self.disp_max)
        if near_zero < self.margin_applied:
            raise FormatError(
                f"disparity range [{self.disp_min}, {self.disp_max}] is not "
                f"bounded away from zero by the margin {self.margin_applied}"
            )
        if rpc1 is not None and rpc2 is not None and roi is not None:
            for rpc, h in ((rpc1, self.h1), (rpc2, self.h2)):
                cols, rows = _roi_corner_pixels(rpc, roi)
                cr, rr = apply_homography(h, cols, rows)
                if (np.min(cr) < 0 or np.min(rr) < 0
                        or np.max(cr) >= self.out_width
                        or np.max(rr) >= self.out_height):
                    raise FormatError(
                        "ROI corners fall outside the rectified canvas "
                        f"{self.out_width}x{self.out_height}"
                    )
        return self


# ----------------------------------------------------------------------
# Virtual correspondences and the affine rectifying fit
# ----------------------------------------------------------------------

def virtual_matches(rpc1, rpc2, roi: Roi, grid_n: int = DEFAULT_GRID_N):
    """RPC-driven virtual correspondences over the ROI.

    Samples a grid_n x grid_n lon/lat grid at the two ROI altitudes and
    projects every ground point through both cameras. Points that fail
    either projection are skipped.

    Returns:
        List of ((col1, row1), (col2, row2)) pixel pairs, >= 8 entries.

    Raises:
        InsufficientCorrespondences: fewer than 8 valid pairs.
    """
    if grid_n < 3:
        raise ConfigError(f"grid_n must be >= 3, got {grid_n}")
    lon = np.linspace(roi.lon_min, roi.lon_max, grid_n)
    lat = np.linspace(roi.lat_min, roi.lat_max, grid_n)
    lon_g, lat_g = np.meshgrid(lon, lat, indexing="ij")
    lon_g = np.concatenate([lon_g.ravel(), lon_g.ravel()])
    lat_g = np.concatenate([lat_g.ravel(), lat_g.ravel()])
    alt_g = np.concatenate([
        np.full(grid_n * grid_n, roi.alt_lo),
        np.full(grid_n * grid_n, roi.alt_hi),
    ])
    c1, r1, v1 = rpc1.try_project(lon_g, lat_g, alt_g)
    c2, r2, v2 = rpc2.try_project(lon_g, lat_g, alt_g)
    valid = v1 & v2
    n = int(np.count_nonzero(valid))
    if n < MIN_CORRESPONDENCES:
        raise InsufficientCorrespondences(
            f"only {n} valid virtual correspondences "
            f"(need >= {MIN_CORRESPONDENCES})"
        )
    return [
        ((float(c1[i]), float(r1[i])), (float(c2[i]), float(r2[i])))
        for i in np.flatnonzero(valid)
    ]


def _corr_arrays(correspondences):
    arr = np.asarray(correspondences, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1:] != (2, 2):
        raise FormatError(
            f"correspondences must be (n, 2, 2)-shaped, got {arr.shape}"
        )
    return arr[:, 0, 0], arr[:, 0, 1], arr[:, 1, 0], arr[:, 1, 1]


def _rotation_about(r2x2, center):
    h = np.eye(3)
    h[:2, :2] = r2x2
    cx, cy = center
    h[0, 2] = cx - r2x2[0, 0] * cx - r2x2[0, 1] * cy
    h[1, 2] = cy - r2x2[1, 0] * cx - r2x2[1, 1] * cy
    return h


def fit_rectifying_transforms(correspondences):
    """Fit affine rectifying transforms from point correspondences.

    Fits the affine fundamental constraint a*x2 + b*y2 + c*x1 + d*y1 + e = 0
    by SVD on centered coordinates, rotates each image so its epipolar lines
    become horizontal (the left transform is a pure rotation about the
    correspondence centroid), then aligns rows with a vertical scale/offset
    on the right image.

    Returns:
        (h1, h2) as 3x3 arrays with max |row1' - row2'| <= 0.5 px over the
        input correspondences.

    Raises:
        InsufficientCorrespondences: fewer than 8 correspondences.
        DegenerateGeometry: rank-deficient fit (e.g. collinear points or a
            single-altitude grid).
        ResidualTooLarge: vertical residual above 0.5 px (affine epipolar
            model inadequate for this ROI).
    """
    x1, y1, x2, y2 = _corr_arrays(correspondences)
    n = x1.size
    if n < MIN_CORRESPONDENCES:
        raise InsufficientCorrespondences(
            f"{n} correspondences, need >= {MIN_CORRESPONDENCES}"
        )
    cols = np.stack([
        x2 - x2.mean(), y2 - y2.mean(), x1 - x1.mean(), y1 - y1.mean()
    ], axis=1)
    _, s, vt = np.linalg.svd(cols, full_matrices=False)
    if s[0] <= 0:
        raise DegenerateGeometry("all correspondences coincide")
    if s[2] < 1e-9 * s[0]:
        # The null space is two-dimensional (e.g. identical cameras, where
        # x2 = x1 and y2 = y1 make two constraints hold at once). If it
        # contains a pure row relation (zero x components) the pair is
        # already row-aligned and that vector is the right epipolar
        # constraint; otherwise the geometry is genuinely unusable.
        v3, v4 = vt[2], vt[3]
        det2 = v3[0] * v4[2] - v3[2] * v4[0]
        combo = None
        if abs(det2) < 1e-9:
            alpha, beta = -v4[0], v3[0]
            if math.hypot(alpha, beta) < 1e-12:
                alpha, beta = -v4[2], v3[2]
            if math.hypot(alpha, beta) < 1e-12:
                alpha, beta = 1.0, 0.0  # both basis vectors already pure-row
            w = alpha * v3 + beta * v4
            norm = np.linalg.norm(w)
            if norm > 1e-12 and max(abs(w[0]), abs(w[2])) < 1e-6 * norm:
                combo = w / norm
        if combo is None:
            raise DegenerateGeometry(
                "affine fundamental fit is rank-deficient "
                f"(singular values {s.tolist()})"
            )
        a, b, c, d = combo
    else:
        a, b, c, d = vt[-1]
    if d < 0 or (d == 0 and b > 0):
        a, b, c, d = -a, -b, -c, -d
    rho1 = math.hypot(c, d)
    rho2 = math.hypot(a, b)
    if rho1 < 1e-12 or rho2 < 1e-12:
        raise DegenerateGeometry(
            "epipolar direction is undefined for one of the images"
        )
    r1 = np.array([[d, -c], [c, d]]) / rho1
    r2 = np.array([[b, -a], [a, b]]) / rho2
    m1 = (float(x1.mean()), float(y1.mean()))
    m2 = (float(x2.mean()), float(y2.mean()))
    h1 = _rotation_about(r1, m1)

    def row_fit(r2mat):
        h2r = _rotation_about(r2mat, m2)
        _, y1p = apply_homography(h1, x1, y1)
        x2p, y2p = apply_homography(h2r, x2, y2)
        var = float(np.var(y2p))
        if var < 1e-12:
            scale = 1.0
        else:
            scale = float(np.cov(y2p, y1p, bias=True)[0, 1] / var)
        offset = float(np.mean(y1p) - scale * np.mean(y2p))
        return h2r, x2p, y2p, y1p, scale, offset

    h2r, x2p, y2p, y1p, scale, offset = row_fit(r2)
    if scale < 0:
        # The null vector's sign left image 2 upside down; rotate it by pi.
        h2r, x2p, y2p, y1p, scale, offset = row_fit(-r2)
    v = np.array([[1.0, 0.0, 0.0], [0.0, scale, offset], [0.0, 0.0, 1.0]])
    h2 = v @ h2r
    residual = np.max(np.abs(y1p - (scale * y2p + offset)))
    if residual > FIT_RESIDUAL_MAX_PX:
        raise ResidualTooLarge(
            f"max vertical residual {residual:.3f} px exceeds "
            f"{FIT_RESIDUAL_MAX_PX} px; affine epipolar model inadequate"
        )
    return h1, h2


def shear_refine(h2, rectified_correspondences):
    """Compose h2 with the horizontal shear that flattens the row trend.

    Fits disparity = slope * row + intercept by least squares over the
    rectified correspondences and applies x' = x + s*y with s = -slope,
    unless that would widen the disparity range (degenerate fits return h2
    unchanged).

    Returns:
        (h2_refined, s).
    """
    x1, _, x2, y2 = _corr_arrays(rectified_correspondences)
    disp = x2 - x1
    var = float(np.var(y2))
    if var < 1e-12:
        return np.asarray(h2, dtype=np.float64), 0.0
    slope = float(np.cov(y2, disp, bias=True)[0, 1] / var)
    s = -slope
    row_span = float(y2.max() - y2.min())
    if not math.isfinite(s) or abs(s) * row_span < 1e-9:
        return np.asarray(h2, dtype=np.float64), 0.0
    new_disp = disp + s * y2
    width_before = float(disp.max() - disp.min())
    width_after = float(new_disp.max() - new_disp.min())
    if width_after > width_before:
        return np.asarray(h2, dtype=np.float64), 0.0
    shear = np.array([[1.0, s, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    return shear @ np.asarray(h2, dtype=np.float64), s


# ----------------------------------------------------------------------
# Sparse matching on rectified images (Harris + ZNCC, mutual best)
# ----------------------------------------------------------------------

def _harris_corners(img, max_corners, border):
    """Corner (row, col) candidates sorted by decreasing response."""
    work = np.asarray(img, dtype=np.float64)
    nan_mask = ~np.isfinite(work)
    if nan_mask.any():
        work = np.where(nan_mask, 0.0, work)
    gx = ndimage.sobel(work, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(work, axis=0, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, 1.5, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, 1.5, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, 1.5, mode="nearest")
    resp = sxx * syy - sxy * sxy - 0.06 * (sxx + syy) ** 2
    if nan_mask.any():
        near_nan = ndimage.maximum_filter(nan_mask.astype(np.uint8),
                                          size=2 * border + 1) > 0
        resp[near_nan] = -np.inf
    resp[:border, :] = -np.inf
    resp[-border:, :] = -np.inf
    resp[:, :border] = -np.inf
    resp[:, -border:] = -np.inf
    peak = float(np.max(resp)) if resp.size else 0.0
    if not np.isfinite(peak) or peak <= 0.0:
        return np.empty((0, 2), dtype=np.int64)
    local_max = (resp == ndimage.maximum_filter(resp, size=5))
    keep = local_max & (resp > 1e-4 * peak)
    rows, cols = np.nonzero(keep)
    order = np.argsort(resp[rows, cols])[::-1][:max_corners]
    return np.stack([rows[order], cols[order]], axis=1)


def _multiscale_corners(img, max_corners, border):
    corners = [_harris_corners(img, max_corners, border)]
    h, w = img.shape
    if min(h, w) >= 4 * border:
        half = img[: h - h % 2, : w - w % 2]
        half = 0.25 * (half[0::2, 0::2] + half[1::2, 0::2]
                       + half[0::2, 1::2] + half[1::2, 1::2])
        coarse = _harris_corners(half, max_corners // 2, border // 2 + 1)
        coarse = coarse * 2
        in_bounds = ((coarse[:, 0] >= border) & (coarse[:, 0] < h - border)
                     & (coarse[:, 1] >= border) & (coarse[:, 1] < w - border))
        corners.append(coarse[in_bounds])
    merged = np.concatenate(corners, axis=0)
    taken = np.zeros(img.shape, dtype=bool)
    keep = []
    for r, c in merged:
        r0, r1 = max(0, r - 2), min(img.shape[0], r + 3)
        c0, c1 = max(0, c - 2), min(img.shape[1], c + 3)
        if not taken[r0:r1, c0:c1].any():
            taken[r, c] = True
            keep.append((r, c))
        if len(keep) >= max_corners:
            break
    return np.asarray(keep, dtype=np.int64).reshape(-1, 2)


def _normalized_patches(img, corners, radius):
    """Zero-mean unit-norm patch vectors; invalid patches are dropped."""
    if corners.shape[0] == 0:
        return np.empty((0, (2 * radius + 1) ** 2)), corners
    offs = np.arange(-radius, radius + 1)
    rows = corners[:, 0][:, None, None] + offs[None, :, None]
    cols = corners[:, 1][:, None, None] + offs[None, None, :]
    patches = np.asarray(img, dtype=np.float64)[rows, cols]
    flat = patches.reshape(corners.shape[0], -1)
    finite = np.all(np.isfinite(flat), axis=1)
    centered = flat - np.nanmean(flat, axis=1, keepdims=True)
    norm = np.linalg.norm(centered, axis=1)
    ok = finite & (norm > 1e-9)
    centered = centered[ok] / norm[ok][:, None]
    return centered, corners[ok]


def detect_sparse_matches(img1, img2, max_corners=1500,
                          min_score=0.6, row_tol=MATCH_ROW_TOL_PX,
                          min_matches=MIN_SPARSE_MATCHES):
    """Sparse correspondences between two rectified images.

    Multi-scale Harris corners in both images, zero-mean normalized
    cross-correlation of 13x13 patches restricted to candidates within
    row_tol rows, mutual-best filtering, ranked by score.

    Returns:
        List of SparseMatch sorted by decreasing score (>= min_matches).

    Raises:
        InsufficientMatches: fewer than min_matches mutual-best matches.
    """
    img1 = np.asarray(img1, dtype=np.float32)
    img2 = np.asarray(img2, dtype=np.float32)
    border = PATCH_RADIUS + 2
    c1 = _multiscale_corners(img1, max_corners, border)
    c2 = _multiscale_corners(img2, max_corners, border)
    n1, c1 = _normalized_patches(img1, c1, PATCH_RADIUS)
    n2, c2 = _normalized_patches(img2, c2, PATCH_RADIUS)
    if n1.shape[0] == 0 or n2.shape[0] == 0:
        raise InsufficientMatches(
            f"corner detection produced {n1.shape[0]}/{n2.shape[0]} usable "
            "corners (textureless or empty overlap)"
        )
    scores = n1 @ n2.T
    row_gap = np.abs(c1[:, 0][:, None].astype(np.float64)
                     - c2[:, 0][None, :].astype(np.float64))
    scores[row_gap > row_tol] = -np.inf
    best12 = np.argmax(scores, axis=1)
    best21 = np.argmax(scores, axis=0)
    matches = []
    for i, j in enumerate(best12):
        s = scores[i, j]
        if not np.isfinite(s) or s < min_score or best21[j] != i:
            continue
        matches.append(SparseMatch(
            col1=float(c1[i, 1]), row1=float(c1[i, 0]),
            col2=float(c2[j, 1]), row2=float(c2[j, 0]),
            score=float(s),
        ))
    matches = [m for m in matches if abs(m.row_residual) <= row_tol]
    matches.sort(key=lambda m: -m.score)
    if len(matches) < min_matches:
        raise InsufficientMatches(
            f"only {len(matches)} mutual-best matches (need >= {min_matches})"
        )
    return matches


# ----------------------------------------------------------------------
# Polarity / margin enforcement and the altitude cross-check
# ----------------------------------------------------------------------

def enforce_unipolarity(pair: RectifyingPair, matches, polarity: int,
                        margin: float = DEFAULT_MARGIN_PX) -> RectifyingPair:
    """Shift the right image so match disparities clear the margin.

    For polarity +1 the translation is t = margin - min(d); the shifted
    disparities (d - min(d)) + margin then start exactly at the margin.
    The stored search range is the shifted match range expanded by 20% of
    its width (at least 10 px), split across both ends but never crossing
    back over the margin.

    Returns:
        A new RectifyingPair with h2 translated and the range updated.
    """
    if polarity not in (1, -1):
        raise ConfigError(f"polarity must be +1 or -1, got {polarity}")
    if margin < 0:
        raise ConfigError(f"margin must be >= 0, got {margin}")
    if isinstance(matches, np.ndarray):
        disp = np.asarray(matches, dtype=np.float64)
    else:
        disp = match_disparities(matches)
    if disp.size < 1:
        raise InsufficientMatches("need at least one match to set the shift")
    if polarity > 0:
        extreme = float(np.min(disp))
        t = margin - extreme
        shifted = (disp - extreme) + margin
    else:
        extreme = float(np.max(disp))
        t = -margin - extreme
        shifted = (disp - extreme) - margin
    lo = float(np.min(shifted))
    hi = float(np.max(shifted))
    expansion = max(RANGE_EXPANSION_FRACTION * (hi - lo),
                    RANGE_EXPANSION_MIN_PX)
    lo_e = lo - 0.5 * expansion
    hi_e = hi + 0.5 * expansion
    if polarity > 0:
        lo_e = max(lo_e, margin)
    else:
        hi_e = min(hi_e, -margin)
    shift = np.array([[1.0, 0.0, t], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    return RectifyingPair(
        h1=pair.h1,
        h2=shift @ pair.h2,
        disp_min=lo_e,
        disp_max=hi_e,
        polarity=polarity,
        margin_applied=float(margin),
        out_width=pair.out_width,
        out_height=pair.out_height,
        shear_applied=pair.shear_applied,
        shift_applied=t,
        match_disparities=shifted,
    )


def _roi_corner_pixels(rpc, roi: Roi):
    lons, lats = zip(*roi.corners())
    lon = np.array(lons * 2)
    lat = np.array(lats * 2)
    alt = np.array([roi.alt_lo] * 4 + [roi.alt_hi] * 4)
    col, row = rpc.project(lon, lat, alt)
    return col, row


ALTITUDE_TREND_EPS_PX = 1e-9


def check_altitude_consistency(rpc1, rpc2, pair: RectifyingPair,
                               roi: Roi) -> bool:
    """True iff the rectified disparity grows with altitude as declared.

    Projects the ROI center at the ROI's two altitudes through each RPC and
    its rectifying homography; with disparities d(alt) = col2' - col1', the
    pair is consistent iff polarity * (d(alt_hi) - d(alt_lo)) > 0. Trends
    below 1e-9 px are treated as zero so floating-point noise on a
    baseline-free pair cannot pass the strict inequality.
    """
    lon_c, lat_c = roi.center
    d = []
    for alt in (roi.alt_lo, roi.alt_hi):
        c1, r1 = rpc1.project(lon_c, lat_c, alt)
        c2, r2 = rpc2.project(lon_c, lat_c, alt)
        c1p, _ = apply_homography(pair.h1, c1, r1)
        c2p, _ = apply_homography(pair.h2, c2, r2)
        d.append(c2p - c1p)
    return pair.polarity * (d[1] - d[0]) > ALTITUDE_TREND_EPS_PX


# ----------------------------------------------------------------------
# Image warping
# ----------------------------------------------------------------------

def _cubic_weights(f):
    """Keys bicubic weights (a = -0.5) for taps at offsets -1, 0, 1, 2."""
    f2 = f * f
    f3 = f2 * f
    w_m1 = -0.5 * (f3 - 2.0 * f2 + f)
    w_0 = 1.5 * f3 - 2.5 * f2 + 1.0
    w_1 = -1.5 * f3 + 2.0 * f2 + 0.5 * f
    w_2 = 0.5 * (f3 - f2)
    return (w_m1, w_0, w_1, w_2)


def rectify_image(img, h, out_w: int, out_h: int) -> np.ndarray:
    """Inverse-warp an image through a homography with bicubic sampling.

    Output pixels whose bicubic footprint touches an invalid or
    out-of-image sample become NaN. Integer-aligned mappings reproduce
    source pixels bit-exactly (the cubic weights collapse to 0/1).

    Returns:
        (out_h, out_w) float32 raster with NaN marking no-data.
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise FormatError(f"expected a 2D grayscale raster, got {img.shape}")
    src_h, src_w = img.shape
    hinv = invert_homography(h)
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64),
                         np.arange(out_h, dtype=np.float64))
    wv = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    with np.errstate(all="ignore"):
        sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / wv
        sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / wv
    inside = (np.abs(wv) > 1e-12) & (sx >= 0.0) & (sx <= src_w - 1.0) \
        & (sy >= 0.0) & (sy <= src_h - 1.0)
    sx = np.where(inside, sx, 0.0)
    sy = np.where(inside, sy, 0.0)
    ix = np.floor(sx)
    iy = np.floor(sy)
    fx = sx - ix
    fy = sy - iy
    wx = _cubic_weights(fx)
    wy = _cubic_weights(fy)
    padded = np.full((src_h + 4, src_w + 4), np.nan, dtype=np.float64)
    padded[2:-2, 2:-2] = img
    bx = ix.astype(np.int64) + 2
    by = iy.astype(np.int64) + 2
    acc = np.zeros((out_h, out_w), dtype=np.float64)
    for j, wyj in enumerate(wy, start=-1):
        for i, wxi in enumerate(wx, start=-1):
            weight = wyj * wxi
            tap = padded[by + j, bx + i]
            # Zero-weight taps contribute nothing even when they are NaN,
            # so integer-aligned warps stay bit-exact near the borders.
            acc += np.where(weight == 0.0, 0.0, weight * tap)
    out = acc.astype(np.float32)
    out[~inside] = np.nan
    return out


# ----------------------------------------------------------------------
# Full build
# ----------------------------------------------------------------------

def _image_corner_canvas(h1, h2, shape1, shape2):
    """Common canvas covering both warped image extents."""
    points = []
    for h, (ih, iw) in ((h1, shape1), (h2, shape2)):
        cols = np.array([0.0, iw - 1.0, 0.0, iw - 1.0])
        rows = np.array([0.0, 0.0, ih - 1.0, ih - 1.0])
        points.append(apply_homography(h, cols, rows))
    min_x = min(float(np.min(c)) for c, _ in points)
    min_y = min(float(np.min(r)) for _, r in points)
    max_x = max(float(np.max(c)) for c, _ in points)
    max_y = max(float(np.max(r)) for _, r in points)
    return _padded_canvas(min_x, max_x, min_y, max_y)


def _padded_canvas(min_x, max_x, min_y, max_y):
    # Integer translation with a 1 px border keeps containment checks
    # robust against re-association of the composed transform.
    tx = 1.0 - math.floor(min_x)
    ty = 1.0 - math.floor(min_y)
    shift = np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    out_w = int(math.floor(max_x) - math.floor(min_x)) + 3
    out_h = int(math.floor(max_y) - math.floor(min_y)) + 3
    return shift, out_w, out_h


def _roi_corner_canvas(rpc1, rpc2, h1, h2, roi):
    cols = []
    rows = []
    for rpc, h in ((rpc1, h1), (rpc2, h2)):
        c, r = _roi_corner_pixels(rpc, roi)
        cp, rp = apply_homography(h, c, r)
        cols.append(cp)
        rows.append(rp)
    cols = np.concatenate(cols)
    rows = np.concatenate(rows)
    return _padded_canvas(float(cols.min()), float(cols.max()),
                          float(rows.min()), float(rows.max()))


def build_rectification(rpc1, rpc2, img1, img2, roi: Roi,
                        polarity_hint: int = 1,
                        margin: float = DEFAULT_MARGIN_PX,
                        grid_n: int = DEFAULT_GRID_N) -> RectifyingPair:
    """Compute the rectifying pair with polarity and margin enforced.

    Steps: virtual correspondences -> affine rectifying fit -> shear
    refinement -> sparse matching on the initially rectified images ->
    polarity/margin shift -> altitude-consistency check (retried with the
    opposite polarity on failure) -> final canvas sized to the ROI corners.

    Raises:
        AltitudeInconsistent: neither polarity passes the altitude check.
        Errors from the individual steps are propagated.
    """
    corrs = virtual_matches(rpc1, rpc2, roi, grid_n)
    h1, h2 = fit_rectifying_transforms(corrs)
    rect_corrs = []
    for (p1, p2) in corrs:
        q1 = apply_homography(h1, p1[0], p1[1])
        q2 = apply_homography(h2, p2[0], p2[1])
        rect_corrs.append((q1, q2))
    h2, shear = shear_refine(h2, rect_corrs)

    canvas_shift, cw, ch = _image_corner_canvas(
        h1, h2, np.shape(img1), np.shape(img2))
    w1 = rectify_image(img1, canvas_shift @ h1, cw, ch)
    w2 = rectify_image(img2, canvas_shift @ h2, cw, ch)
    matches = detect_sparse_matches(w1, w2)

    base = RectifyingPair(
        h1=h1, h2=h2,
        disp_min=0.0, disp_max=0.0, polarity=1, margin_applied=0.0,
        out_width=cw, out_height=ch, shear_applied=shear,
    )
    pair = enforce_unipolarity(base, matches, polarity_hint, margin)
    if not check_altitude_consistency(rpc1, rpc2, pair, roi):
        pair = enforce_unipolarity(base, matches, -polarity_hint, margin)
        if not check_altitude_consistency(rpc1, rpc2, pair, roi):
            raise AltitudeInconsistent(
                "rectified disparity does not vary with altitude in either "
                "polarity (no usable baseline)"
            )

    final_shift, out_w, out_h = _roi_corner_canvas(
        rpc1, rpc2, pair.h1, pair.h2, roi)
    final = RectifyingPair(
        h1=final_shift @ pair.h1,
        h2=final_shift @ pair.h2,
        disp_min=pair.disp_min,
        disp_max=pair.disp_max,
        polarity=pair.polarity,
        margin_applied=pair.margin_applied,
        out_width=out_w,
        out_height=out_h,
        shear_applied=shear,
        shift_applied=pair.shift_applied,
        match_disparities=pair.match_disparities,
    )
    return final.validate(rpc1, rpc2, roi)
