"""Ground/image geometry: homographies, altitude-search triangulation, UTM.

The UTM conversion is a 6th-order Krueger series on WGS84 (forward and
inverse), accurate well below 1 mm inside a zone. Triangulation minimizes
the planar distance between the two localized rays by golden-section search
over altitude; planar distances use a local equirectangular metric, which is
accurate to negligible error for sub-kilometer scenes.
"""

from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateRays,
    FormatError,
    OutOfUtmRange,
    PointAtInfinity,
)

# ----------------------------------------------------------------------
# Homographies (3x3, row-major, applied with projective division)
# ----------------------------------------------------------------------

W_EPS = 1e-12


def apply_homography(h, col, row):
    """Apply a 3x3 homography to pixel coordinates.

    Args:
        h: 3x3 matrix (anything np.asarray accepts).
        col, row: pixel coordinates, scalar or array.

    Returns:
        (col', row') with projective division applied.

    Raises:
        PointAtInfinity: |third homogeneous coordinate| < 1e-12.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise FormatError(f"homography must be 3x3, got {h.shape}")
    scalar = np.isscalar(col) and np.isscalar(row)
    col = np.asarray(col, dtype=np.float64)
    row = np.asarray(row, dtype=np.float64)
    x = h[0, 0] * col + h[0, 1] * row + h[0, 2]
    y = h[1, 0] * col + h[1, 1] * row + h[1, 2]
    w = h[2, 0] * col + h[2, 1] * row + h[2, 2]
    if np.any(np.abs(w) < W_EPS):
        raise PointAtInfinity("homography maps point to infinity (|w| < 1e-12)")
    if scalar:
        return float(x / w), float(y / w)
    return x / w, y / w


def compose_homographies(*hs):
    """Compose homographies; the first argument is applied last."""
    out = np.eye(3)
    for h in hs:
        out = out @ np.asarray(h, dtype=np.float64)
    return out


def invert_homography(h):
    """Invert a homography; rejects singular matrices."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise FormatError(f"homography must be 3x3, got {h.shape}")
    det = np.linalg.det(h)
    if not np.isfinite(det) or abs(det) < 1e-15:
        raise FormatError("homography is singular")
    return np.linalg.inv(h)


def save_homography(path, h) -> None:
    """Write a 3x3 homography as three text lines of three numbers."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise FormatError(f"homography must be 3x3, got {h.shape}")
    lines = [" ".join(f"{v:.17g}" for v in rowv) for rowv in h]
    Path(path).write_text("\n".join(lines) + "\n")


def load_homography(path):
    """Read a 3x3 homography written by save_homography."""
    values = []
    for raw in Path(path).read_text().split():
        try:
            values.append(float(raw))
        except ValueError as exc:
            raise FormatError(f"bad homography value {raw!r}") from exc
    if len(values) != 9:
        raise FormatError(f"homography file must hold 9 numbers, got {len(values)}")
    return np.array(values, dtype=np.float64).reshape(3, 3)


# ----------------------------------------------------------------------
# Local planar metric (equirectangular at a reference latitude)
# ----------------------------------------------------------------------

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


def local_metric(lat0: float):
    """Meters per degree of (longitude, latitude) at latitude lat0.

    Uses the WGS84 prime-vertical radius for longitude and the meridional
    curvature radius for latitude.
    """
    phi = math.radians(lat0)
    s2 = math.sin(phi) ** 2
    den = math.sqrt(1.0 - WGS84_E2 * s2)
    n_radius = WGS84_A / den
    m_radius = WGS84_A * (1.0 - WGS84_E2) / den**3
    deg = math.pi / 180.0
    return n_radius * math.cos(phi) * deg, m_radius * deg


def planar_distance_m(lon1, lat1, lon2, lat2, lat0: float):
    """Equirectangular planar distance in meters at reference latitude lat0."""
    m_lon, m_lat = local_metric(lat0)
    dx = (np.asarray(lon2) - np.asarray(lon1)) * m_lon
    dy = (np.asarray(lat2) - np.asarray(lat1)) * m_lat
    return np.hypot(dx, dy)


# ----------------------------------------------------------------------
# Triangulation by golden-section altitude search
# ----------------------------------------------------------------------

ALT_TOL_M = 0.01
DEGENERATE_EPS_M = 1e-6
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def triangulate(rpc1, rpc2, col1, row1, col2, row2,
                alt_lo: float | None = None, alt_hi: float | None = None,
                mask_errors: bool = False):
    """Intersect two RPC viewing rays by searching over altitude.

    Finds the altitude minimizing the planar distance between the two
    localizations (golden-section search to 1 cm), and returns the midpoint
    of the two localized points together with the residual distance.

    Args:
        rpc1, rpc2: RpcModel of each view.
        col1, row1, col2, row2: matched pixel coordinates (scalar or array).
        alt_lo, alt_hi: altitude bracket, meters; defaults to
            rpc1.alt_off +/- rpc1.alt_scale (the model's validity range).
        mask_errors: when True, per-point failures (no localization
            convergence, parallel rays) yield NaN coordinates and an
            infinite residual instead of raising.

    Returns:
        (lon, lat, alt, residual_m), scalars or arrays following the inputs.

    Raises:
        DegenerateRays: the distance varies by < 1e-6 m across the bracket
            (suppressed per-point by ``mask_errors``).
        NoConvergence / OutOfValidityBox: propagated from localization
            (NoConvergence suppressed per-point by ``mask_errors``).
    """
    if alt_lo is None:
        alt_lo = rpc1.alt_off - rpc1.alt_scale
    if alt_hi is None:
        alt_hi = rpc1.alt_off + rpc1.alt_scale
    if not alt_lo < alt_hi:
        raise FormatError(f"invalid altitude bracket [{alt_lo}, {alt_hi}]")
    scalar = np.isscalar(col1) and np.isscalar(row1)
    col1, row1, col2, row2 = np.broadcast_arrays(
        np.asarray(col1, dtype=np.float64), np.asarray(row1, dtype=np.float64),
        np.asarray(col2, dtype=np.float64), np.asarray(row2, dtype=np.float64),
    )
    lat0 = rpc1.lat_off
    m_lon, m_lat = local_metric(lat0)

    def dist(alt):
        lon_a, lat_a = rpc1.localize(col1, row1, alt,
                                     mask_failures=mask_errors)
        lon_b, lat_b = rpc2.localize(col2, row2, alt,
                                     mask_failures=mask_errors)
        dx = (lon_b - lon_a) * m_lon
        dy = (lat_b - lat_a) * m_lat
        return np.hypot(dx, dy)

    shape = col1.shape
    a = np.full(shape, float(alt_lo))
    b = np.full(shape, float(alt_hi))
    f_lo = dist(a)
    f_hi = dist(b)
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1 = dist(x1)
    f2 = dist(x2)

    spread = (np.maximum(np.maximum(f_lo, f_hi), np.maximum(f1, f2))
              - np.minimum(np.minimum(f_lo, f_hi), np.minimum(f1, f2)))
    degenerate = spread < DEGENERATE_EPS_M
    if np.any(degenerate) and not mask_errors:
        n_bad = int(np.count_nonzero(degenerate))
        raise DegenerateRays(
            f"ray distance varies by < {DEGENERATE_EPS_M:g} m across the "
            f"altitude bracket for {n_bad} point(s) (parallel rays)"
        )

    span = float(alt_hi - alt_lo)
    n_iter = max(0, math.ceil(math.log(ALT_TOL_M / span) / math.log(_INVPHI)))
    for _ in range(n_iter):
        take = f1 < f2
        b = np.where(take, x2, b)
        a = np.where(take, a, x1)
        x1_new = np.where(take, b - _INVPHI * (b - a), x2)
        x2_new = np.where(take, x1, a + _INVPHI * (b - a))
        fresh = np.where(take, x1_new, x2_new)
        f_fresh = dist(fresh)
        f1, f2 = (np.where(take, f_fresh, f2), np.where(take, f1, f_fresh))
        x1, x2 = x1_new, x2_new

    alt = 0.5 * (a + b)
    lon_a, lat_a = rpc1.localize(col1, row1, alt, mask_failures=mask_errors)
    lon_b, lat_b = rpc2.localize(col2, row2, alt, mask_failures=mask_errors)
    residual = np.hypot((lon_b - lon_a) * m_lon, (lat_b - lat_a) * m_lat)
    lon = 0.5 * (lon_a + lon_b)
    lat = 0.5 * (lat_a + lat_b)
    if mask_errors:
        bad = degenerate | ~np.isfinite(lon) | ~np.isfinite(lat)
        if np.any(bad):
            lon = np.where(bad, np.nan, lon)
            lat = np.where(bad, np.nan, lat)
            alt = np.where(bad, np.nan, alt)
            residual = np.where(bad, np.inf, residual)
    if scalar:
        return float(lon), float(lat), float(alt), float(residual)
    return lon, lat, alt, residual


# ----------------------------------------------------------------------
# UTM (WGS84, 6th-order Krueger series)
# ----------------------------------------------------------------------

UTM_K0 = 0.9996
UTM_FALSE_EASTING = 500000.0
UTM_FALSE_NORTHING_SOUTH = 10000000.0
UTM_LAT_MIN = -80.0
UTM_LAT_MAX = 84.0

_N = WGS84_F / (2.0 - WGS84_F)
_E = math.sqrt(WGS84_E2)
_A_BAR = WGS84_A / (1.0 + _N) * (1.0 + _N**2 / 4.0 + _N**4 / 64.0
                                 + _N**6 / 256.0)

_ALPHA = (
    _N / 2.0 - 2.0 / 3.0 * _N**2 + 5.0 / 16.0 * _N**3 + 41.0 / 180.0 * _N**4
    - 127.0 / 288.0 * _N**5 + 7891.0 / 37800.0 * _N**6,
    13.0 / 48.0 * _N**2 - 3.0 / 5.0 * _N**3 + 557.0 / 1440.0 * _N**4
    + 281.0 / 630.0 * _N**5 - 1983433.0 / 1935360.0 * _N**6,
    61.0 / 240.0 * _N**3 - 103.0 / 140.0 * _N**4 + 15061.0 / 26880.0 * _N**5
    + 167603.0 / 181440.0 * _N**6,
    49561.0 / 161280.0 * _N**4 - 179.0 / 168.0 * _N**5
    + 6601661.0 / 7257600.0 * _N**6,
    34729.0 / 80640.0 * _N**5 - 3418889.0 / 1995840.0 * _N**6,
    212378941.0 / 319334400.0 * _N**6,
)

_BETA = (
    _N / 2.0 - 2.0 / 3.0 * _N**2 + 37.0 / 96.0 * _N**3 - 1.0 / 360.0 * _N**4
    - 81.0 / 512.0 * _N**5 + 96199.0 / 604800.0 * _N**6,
    1.0 / 48.0 * _N**2 + 1.0 / 15.0 * _N**3 - 437.0 / 1440.0 * _N**4
    + 46.0 / 105.0 * _N**5 - 1118711.0 / 3870720.0 * _N**6,
    17.0 / 480.0 * _N**3 - 37.0 / 840.0 * _N**4 - 209.0 / 4480.0 * _N**5
    + 5569.0 / 90720.0 * _N**6,
    4397.0 / 161280.0 * _N**4 - 11.0 / 504.0 * _N**5
    - 830251.0 / 7257600.0 * _N**6,
    4583.0 / 161280.0 * _N**5 - 108847.0 / 3991680.0 * _N**6,
    20648693.0 / 638668800.0 * _N**6,
)

_ZONE_RE = re.compile(r"^\s*(\d{1,2})\s*([NSns])\s*$")


def utm_zone_of(lon: float, lat: float) -> str:
    """UTM zone label (e.g. '21S') for a geodetic point."""
    if not (UTM_LAT_MIN <= lat <= UTM_LAT_MAX):
        raise OutOfUtmRange(
            f"latitude {lat} outside UTM range [{UTM_LAT_MIN}, {UTM_LAT_MAX}]"
        )
    lon = ((lon + 180.0) % 360.0) - 180.0
    zone = int((lon + 180.0) // 6.0) + 1
    zone = min(max(zone, 1), 60)
    return f"{zone}{'N' if lat >= 0.0 else 'S'}"


def parse_utm_zone(zone: str):
    """Parse a '21S'-style zone label into (zone_number, is_south)."""
    m = _ZONE_RE.match(str(zone))
    if not m:
        raise FormatError(f"bad UTM zone {zone!r}; expected like '21S'")
    number = int(m.group(1))
    if not 1 <= number <= 60:
        raise FormatError(f"UTM zone number {number} outside 1..60")
    return number, m.group(2).upper() == "S"


def geodetic_to_utm(lon, lat, zone: str | None = None):
    """Convert geodetic coordinates to UTM (WGS84).

    Args:
        lon, lat: degrees, scalar or array.
        zone: optional zone label like '21S' to force a zone; by default the
            zone of the first point is used for the whole batch.

    Returns:
        (easting, northing, zone_label).

    Raises:
        OutOfUtmRange: latitude outside [-80, 84].
    """
    scalar = np.isscalar(lon) and np.isscalar(lat)
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    if np.any(lat < UTM_LAT_MIN) or np.any(lat > UTM_LAT_MAX):
        worst = float(lat.flat[int(np.argmax(np.abs(lat)))])
        raise OutOfUtmRange(
            f"latitude {worst} outside UTM range [{UTM_LAT_MIN}, {UTM_LAT_MAX}]"
        )
    if zone is None:
        zone = utm_zone_of(float(lon.flat[0]), float(lat.flat[0]))
    number, south = parse_utm_zone(zone)
    lon0 = 6.0 * number - 183.0

    phi = np.radians(lat)
    lam = np.radians(((lon - lon0 + 180.0) % 360.0) - 180.0)
    s = np.sin(phi)
    t = np.sinh(np.arctanh(s) - _E * np.arctanh(_E * s))
    xi_p = np.arctan2(t, np.cos(lam))
    eta_p = np.arcsinh(np.sin(lam) / np.hypot(t, np.cos(lam)))
    xi = xi_p.copy()
    eta = eta_p.copy()
    for j, alpha in enumerate(_ALPHA, start=1):
        xi += alpha * np.sin(2 * j * xi_p) * np.cosh(2 * j * eta_p)
        eta += alpha * np.cos(2 * j * xi_p) * np.sinh(2 * j * eta_p)
    easting = UTM_FALSE_EASTING + UTM_K0 * _A_BAR * eta
    northing = UTM_K0 * _A_BAR * xi
    if south:
        northing = northing + UTM_FALSE_NORTHING_SOUTH
    label = f"{number}{'S' if south else 'N'}"
    if scalar:
        return float(easting), float(northing), label
    return easting, northing, label


def utm_to_geodetic(easting, northing, zone: str):
    """Invert geodetic_to_utm for a given zone label.

    Returns:
        (lon, lat) in degrees.
    """
    number, south = parse_utm_zone(zone)
    scalar = np.isscalar(easting) and np.isscalar(northing)
    easting = np.asarray(easting, dtype=np.float64)
    northing = np.asarray(northing, dtype=np.float64)
    lon0 = 6.0 * number - 183.0
    xi = np.asarray(
        (northing - (UTM_FALSE_NORTHING_SOUTH if south else 0.0))
        / (UTM_K0 * _A_BAR)
    )
    eta = (easting - UTM_FALSE_EASTING) / (UTM_K0 * _A_BAR)
    xi_p = xi.copy()
    eta_p = np.asarray(eta).copy()
    for j, beta in enumerate(_BETA, start=1):
        xi_p -= beta * np.sin(2 * j * xi) * np.cosh(2 * j * eta)
        eta_p -= beta * np.cos(2 * j * xi) * np.sinh(2 * j * eta)
    t_p = np.sin(xi_p) / np.sqrt(np.sinh(eta_p) ** 2 + np.cos(xi_p) ** 2)
    # Fixed point for the geodetic latitude; contraction factor ~ e^2.
    phi = np.arctan(t_p)
    asinh_tp = np.arcsinh(t_p)
    for _ in range(8):
        phi = np.arctan(np.sinh(asinh_tp + _E * np.arctanh(_E * np.sin(phi))))
    lam = np.arctan2(np.sinh(eta_p), np.cos(xi_p))
    lon = lon0 + np.degrees(lam)
    lat = np.degrees(phi)
    if scalar:
        return float(lon), float(lat)
    return lon, lat
