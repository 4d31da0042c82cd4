"""Triangulated point clouds, DSM rasterization, mosaicking and DSM IO.

Converts filtered disparity maps to 3D points through the inverse
rectifying homographies and RPC triangulation, bins the points onto a
north-up UTM grid by per-cell median, and stitches tile grids into a
seamless mosaic. DSM rasters travel as PFM files with a plain-text
georeferencing sidecar; ground truth may be ingested from a narrow
GeoTIFF subset (single-band, uncompressed, striped).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    FormatError,
    GridMismatch,
    MissingMetadata,
)
from .geometry import (
    apply_homography,
    geodetic_to_utm,
    invert_homography,
    triangulate,
    utm_zone_of,
)
from .matching import CANONICAL_CONVENTION, DisparityMap
from .pfm import read_pfm, write_pfm
from .rectification import RectifyingPair

DEFAULT_CELL_M = 0.5
DEFAULT_NODATA = -9999.0
# Triangulation altitude bracket is widened beyond the stated ROI range so
# terrain slightly outside the declared bounds still triangulates.
ALT_BRACKET_WIDEN_M = 20.0
# Triangulated points whose ray-to-ray residual exceeds this are gross
# mismatches that survived the disparity filters; they are dropped.
RESIDUAL_MAX_M = 3.0
SIDECAR_SUFFIX = ".geo"

# GeoTIFF tags understood by the narrow ground-truth reader.
_TAG_COMPRESSION = 259
_TAG_SAMPLES_PER_PIXEL = 277
_TAG_TILE_WIDTH = 322
_TAG_TILE_LENGTH = 323
_TAG_MODEL_PIXEL_SCALE = 33550
_TAG_MODEL_TIEPOINT = 33922
_TAG_GEO_KEY_DIRECTORY = 34735
_TAG_GDAL_NODATA = 42113
_GEOKEY_PROJECTED_CRS = 3072


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Triangulated ground points in one UTM zone.

    Coordinates are finite by construction; ``residual`` is the ray-to-ray
    planar distance at the triangulated altitude, in meters.
    """

    e: np.ndarray
    n: np.ndarray
    alt: np.ndarray
    residual: np.ndarray
    zone: str

    def __post_init__(self) -> None:
        for name in ("e", "n", "alt", "residual"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            object.__setattr__(self, name, arr)
        sizes = {self.e.size, self.n.size, self.alt.size, self.residual.size}
        if len(sizes) != 1:
            raise ConfigError(f"point cloud field lengths differ: {sizes}")
        if not (np.all(np.isfinite(self.e)) and np.all(np.isfinite(self.n))
                and np.all(np.isfinite(self.alt))):
            raise ConfigError("point cloud coordinates must be finite")
        if np.any(self.residual < 0):
            raise ConfigError("point cloud residuals must be >= 0")

    def __len__(self) -> int:
        return int(self.e.size)


@dataclass(frozen=True, eq=False)
class DsmGrid:
    """North-up elevation grid in one UTM zone.

    ``origin_e``/``origin_n`` locate the upper-left cell corner; cell (i, j)
    covers eastings [origin_e + j*cell, origin_e + (j+1)*cell) and northings
    (origin_n - (i+1)*cell, origin_n - i*cell]. Missing cells carry NaN in
    ``values``; the ``nodata`` sentinel is used only at the file boundary.
    """

    origin_e: float
    origin_n: float
    cell: float
    width: int
    height: int
    values: np.ndarray
    nodata: float = DEFAULT_NODATA
    crs: str = ""

    def __post_init__(self) -> None:
        if not self.cell > 0:
            raise ConfigError(f"cell size must be > 0, got {self.cell}")
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape != (self.height, self.width):
            raise ConfigError(
                f"values shape {values.shape} does not match "
                f"(height, width)=({self.height}, {self.width})")
        if np.isfinite(self.nodata):
            values = np.where(values == np.float32(self.nodata),
                              np.float32(np.nan), values)
        object.__setattr__(self, "values", values)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    def col_centers_e(self) -> np.ndarray:
        """Easting of each column's cell center."""
        return self.origin_e + (np.arange(self.width) + 0.5) * self.cell

    def row_centers_n(self) -> np.ndarray:
        """Northing of each row's cell center."""
        return self.origin_n - (np.arange(self.height) + 0.5) * self.cell


def disparity_to_points(d: DisparityMap, pair: RectifyingPair, rpc1, rpc2,
                        alt_lo: float | None = None,
                        alt_hi: float | None = None,
                        origin_col: int = 0,
                        origin_row: int = 0) -> PointCloud:
    """Triangulate every valid disparity pixel into UTM ground points.

    Each valid rectified pixel p maps back to the original images through
    the inverse homographies (right column shifted by the disparity), the
    two viewing rays are intersected over the altitude bracket widened by
    +/-20 m, and the result is converted to UTM. Per-pixel triangulation
    failures and points with residual above 3 m are dropped, never fatal.

    Args:
        d: disparity map in the canonical sign convention.
        pair: the rectification that produced ``d``.
        rpc1, rpc2: cameras of the left and right original images.
        alt_lo, alt_hi: ROI altitude bounds, meters; default to the rpc1
            validity range.
        origin_col, origin_row: rectified coordinates of d's pixel (0, 0);
            nonzero when d is a tile cropped out of the full domain.

    Returns:
        PointCloud with one point per surviving pixel, in raster order.
    """
    if d.convention is not CANONICAL_CONVENTION:
        raise ConfigError(
            f"disparity map must use the canonical sign convention, "
            f"got {d.convention}")
    if alt_lo is None:
        alt_lo = rpc1.alt_off - rpc1.alt_scale
    if alt_hi is None:
        alt_hi = rpc1.alt_off + rpc1.alt_scale
    zone = utm_zone_of(rpc1.lon_off, rpc1.lat_off)
    ys, xs = np.nonzero(d.valid)
    if ys.size == 0:
        empty = np.zeros(0)
        return PointCloud(empty, empty, empty, empty, zone)
    disp = d.values[ys, xs].astype(np.float64)
    cols = xs.astype(np.float64) + origin_col
    rows = ys.astype(np.float64) + origin_row
    inv1 = invert_homography(pair.h1)
    inv2 = invert_homography(pair.h2)
    c1, r1 = apply_homography(inv1, cols, rows)
    c2, r2 = apply_homography(inv2, cols + disp, rows)
    lon, lat, alt, residual = triangulate(
        rpc1, rpc2, c1, r1, c2, r2,
        alt_lo=alt_lo - ALT_BRACKET_WIDEN_M,
        alt_hi=alt_hi + ALT_BRACKET_WIDEN_M,
        mask_errors=True,
    )
    keep = (np.isfinite(lon) & np.isfinite(lat) & np.isfinite(alt)
            & (residual <= RESIDUAL_MAX_M))
    if not np.any(keep):
        empty = np.zeros(0)
        return PointCloud(empty, empty, empty, empty, zone)
    easting, northing, zone = geodetic_to_utm(lon[keep], lat[keep], zone=zone)
    return PointCloud(easting, northing, alt[keep], residual[keep], zone)


def grid_spec_for_bounds(e_min: float, e_max: float, n_min: float,
                         n_max: float, cell: float = DEFAULT_CELL_M):
    """Smallest lattice-aligned grid spec covering the given UTM bounds.

    The origin snaps outward onto multiples of ``cell`` so that grids built
    for different (overlapping) bounds share one lattice and can be
    mosaicked.

    Returns:
        (origin_e, origin_n, width, height).
    """
    if not cell > 0:
        raise ConfigError(f"cell size must be > 0, got {cell}")
    if not (e_min <= e_max and n_min <= n_max):
        raise ConfigError("empty UTM bounds")
    origin_e = np.floor(e_min / cell) * cell
    origin_n = np.ceil(n_max / cell) * cell
    width = int(np.floor((e_max - origin_e) / cell)) + 1
    height = int(np.floor((origin_n - n_min) / cell)) + 1
    return float(origin_e), float(origin_n), width, height


def grid_spec_for_cloud(pc: PointCloud, cell: float = DEFAULT_CELL_M):
    """Grid spec covering every point of the cloud (see grid_spec_for_bounds)."""
    if len(pc) == 0:
        raise ConfigError("empty point cloud has no extent")
    return grid_spec_for_bounds(
        float(np.min(pc.e)), float(np.max(pc.e)),
        float(np.min(pc.n)), float(np.max(pc.n)), cell)


def rasterize(pc: PointCloud, origin_e: float, origin_n: float,
              width: int, height: int, cell: float = DEFAULT_CELL_M,
              nodata: float = DEFAULT_NODATA, crs: str | None = None,
              ) -> DsmGrid:
    """Bin a point cloud onto a north-up grid, one median altitude per cell.

    Each point lands in cell (floor((origin_n - n)/cell),
    floor((e - origin_e)/cell)); points outside the grid are ignored. A
    cell's value is the median of its points' altitudes; empty cells are
    nodata. No hole filling. The result does not depend on point order.
    """
    if crs is None:
        crs = pc.zone
    values = np.full((height, width), np.nan, dtype=np.float32)
    if len(pc) == 0:
        warnings.warn("empty point cloud; DSM grid is all nodata",
                      RuntimeWarning, stacklevel=2)
        return DsmGrid(origin_e, origin_n, cell, width, height, values,
                       nodata, crs)
    col = np.floor((pc.e - origin_e) / cell).astype(np.int64)
    row = np.floor((origin_n - pc.n) / cell).astype(np.int64)
    inside = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    if not np.any(inside):
        return DsmGrid(origin_e, origin_n, cell, width, height, values,
                       nodata, crs)
    flat = row[inside] * width + col[inside]
    alt = pc.alt[inside]
    # Deterministic reduction: sort by (cell, altitude) and take per-segment
    # medians, so any input permutation yields a bit-identical grid.
    order = np.lexsort((alt, flat))
    flat = flat[order]
    alt = alt[order]
    starts = np.flatnonzero(np.r_[True, flat[1:] != flat[:-1]])
    ends = np.r_[starts[1:], flat.size]
    lo = starts + (ends - starts - 1) // 2
    hi = starts + (ends - starts) // 2
    med = 0.5 * (alt[lo] + alt[hi])
    values.flat[flat[starts]] = med.astype(np.float32)
    return DsmGrid(origin_e, origin_n, cell, width, height, values,
                   nodata, crs)


def mosaic(tiles) -> DsmGrid:
    """Stitch tile grids into one grid over their bounding rectangle.

    Cells covered by several tiles take the median of the valid values;
    single-source cells are copied bit-exact; a cell is nodata only when
    every covering tile has nodata there.

    Raises:
        GridMismatch: tiles differ in cell size or CRS, or their origins do
            not sit on one common lattice.
    """
    tiles = list(tiles)
    if not tiles:
        raise ConfigError("mosaic requires at least one tile")
    ref = tiles[0]
    for t in tiles[1:]:
        if t.cell != ref.cell:
            raise GridMismatch(
                f"cell sizes differ: {ref.cell} vs {t.cell}")
        if t.crs != ref.crs:
            raise GridMismatch(f"CRS differ: {ref.crs!r} vs {t.crs!r}")
        for axis, a, b in (("easting", ref.origin_e, t.origin_e),
                           ("northing", ref.origin_n, t.origin_n)):
            steps = (b - a) / ref.cell
            if abs(steps - round(steps)) > 1e-6:
                raise GridMismatch(
                    f"tile {axis} origins {a} and {b} are not aligned on a "
                    f"common {ref.cell} m lattice")
    origin_e = min(t.origin_e for t in tiles)
    origin_n = max(t.origin_n for t in tiles)
    e_max = max(t.origin_e + t.width * t.cell for t in tiles)
    n_min = min(t.origin_n - t.height * t.cell for t in tiles)
    width = int(round((e_max - origin_e) / ref.cell))
    height = int(round((origin_n - n_min) / ref.cell))
    stack = np.full((len(tiles), height, width), np.nan, dtype=np.float32)
    for k, t in enumerate(tiles):
        j0 = int(round((t.origin_e - origin_e) / ref.cell))
        i0 = int(round((origin_n - t.origin_n) / ref.cell))
        stack[k, i0:i0 + t.height, j0:j0 + t.width] = t.values
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN cells
        merged = np.nanmedian(stack, axis=0)
    return DsmGrid(origin_e, origin_n, ref.cell, width, height,
                   merged.astype(np.float32), ref.nodata, ref.crs)


# ----------------------------------------------------------------------
# DSM IO: PFM + sidecar
# ----------------------------------------------------------------------

def sidecar_path(path) -> Path:
    return Path(str(path) + SIDECAR_SUFFIX)


def save_dsm(path, grid: DsmGrid) -> None:
    """Write a DSM as PFM plus a plain-text georeferencing sidecar.

    NaN cells are written as the grid's nodata value. The sidecar holds
    origin_e, origin_n, cell, utm_zone and nodata, one per line.
    """
    values = np.where(np.isfinite(grid.values), grid.values,
                      np.float32(grid.nodata))
    write_pfm(path, values)
    sidecar_path(path).write_text(
        f"{grid.origin_e!r}\n{grid.origin_n!r}\n{grid.cell!r}\n"
        f"{grid.crs}\n{grid.nodata!r}\n")


def load_dsm(path) -> DsmGrid:
    """Read a DSM written by save_dsm; nodata cells come back as NaN."""
    side = sidecar_path(path)
    if not side.exists():
        raise MissingMetadata(f"{side}: georeferencing sidecar not found")
    fields = side.read_text().split()
    if len(fields) != 5:
        raise FormatError(
            f"{side}: expected 5 sidecar fields "
            f"(origin_e origin_n cell utm_zone nodata), got {len(fields)}")
    try:
        origin_e, origin_n, cell = (float(v) for v in fields[:3])
        nodata = float(fields[4])
    except ValueError as exc:
        raise FormatError(f"{side}: non-numeric sidecar field: {exc}") from exc
    values = read_pfm(path)
    h, w = values.shape
    return DsmGrid(origin_e, origin_n, cell, w, h, values,
                   nodata=nodata, crs=fields[3])


# ----------------------------------------------------------------------
# Ground-truth ingestion: narrow GeoTIFF subset
# ----------------------------------------------------------------------

def _zone_from_epsg(epsg: int) -> str:
    if 32601 <= epsg <= 32660:
        return f"{epsg - 32600}N"
    if 32701 <= epsg <= 32760:
        return f"{epsg - 32700}S"
    raise FormatError(
        f"EPSG:{epsg} is not a WGS84 UTM code (326xx/327xx); "
        f"re-project the raster before ingestion")


def read_geotiff(path) -> DsmGrid:
    """Read a single-band uncompressed striped GeoTIFF into a DsmGrid.

    Supports float32 and uint16 samples with ModelPixelScale +
    ModelTiepoint georeferencing and a WGS84 UTM ProjectedCRS geokey.
    Anything outside this subset (compression, tiling, overviews,
    multi-band) is rejected; convert such files before ingestion.

    Raises:
        FormatError: not a TIFF, or outside the supported subset.
        MissingMetadata: georeferencing tags or the CRS geokey are absent.
    """
    from PIL import Image, UnidentifiedImageError

    try:
        im = Image.open(path)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable TIFF: {exc}") from exc
    with im:
        tags = getattr(im, "tag_v2", None)
        if tags is None:
            raise FormatError(f"{path}: not a TIFF file")
        compression = tags.get(_TAG_COMPRESSION, 1)
        if compression != 1:
            raise FormatError(
                f"{path}: compressed GeoTIFF (compression={compression}) is "
                f"not supported; convert to uncompressed first")
        if _TAG_TILE_WIDTH in tags or _TAG_TILE_LENGTH in tags:
            raise FormatError(
                f"{path}: tiled GeoTIFF is not supported; convert to "
                f"striped layout first")
        if getattr(im, "n_frames", 1) > 1:
            raise FormatError(
                f"{path}: multi-page TIFF (overviews?) is not supported")
        if tags.get(_TAG_SAMPLES_PER_PIXEL, 1) != 1:
            raise FormatError(f"{path}: only single-band rasters are supported")

        if _TAG_MODEL_PIXEL_SCALE not in tags or _TAG_MODEL_TIEPOINT not in tags:
            raise MissingMetadata(
                f"{path}: ModelPixelScale/ModelTiepoint tags are required")
        scale = [float(v) for v in tags[_TAG_MODEL_PIXEL_SCALE]]
        tie = [float(v) for v in tags[_TAG_MODEL_TIEPOINT]]
        if len(scale) < 2 or len(tie) < 6:
            raise FormatError(f"{path}: malformed georeferencing tags")
        sx, sy = scale[0], scale[1]
        if sx <= 0 or sy <= 0 or abs(sx - sy) > 1e-9 * max(sx, sy):
            raise FormatError(
                f"{path}: only square positive cells are supported, "
                f"got {sx} x {sy}")
        i, j, _, x, y = tie[0], tie[1], tie[2], tie[3], tie[4]
        origin_e = x - i * sx
        origin_n = y + j * sy

        if _TAG_GEO_KEY_DIRECTORY not in tags:
            raise MissingMetadata(f"{path}: GeoKeyDirectory tag is required")
        keys = [int(v) for v in tags[_TAG_GEO_KEY_DIRECTORY]]
        epsg = None
        for k in range(4, len(keys) - 3, 4):
            key_id, location, count, value = keys[k:k + 4]
            if key_id == _GEOKEY_PROJECTED_CRS and location == 0 and count == 1:
                epsg = value
                break
        if epsg is None:
            raise MissingMetadata(
                f"{path}: ProjectedCRS geokey (3072) not found")
        crs = _zone_from_epsg(epsg)

        nodata = DEFAULT_NODATA
        if _TAG_GDAL_NODATA in tags:
            try:
                nodata = float(str(tags[_TAG_GDAL_NODATA]).strip("\x00 "))
            except ValueError as exc:
                raise FormatError(
                    f"{path}: unparseable nodata tag: {exc}") from exc

        arr = np.asarray(im)
    if arr.ndim != 2:
        raise FormatError(f"{path}: only single-band rasters are supported")
    if arr.dtype not in (np.float32, np.uint16, np.dtype(">f4"),
                         np.dtype("<f4")):
        raise FormatError(
            f"{path}: unsupported sample type {arr.dtype}; only float32 and "
            f"uint16 are supported")
    values = arr.astype(np.float32)
    h, w = values.shape
    return DsmGrid(float(origin_e), float(origin_n), float(sx), w, h, values,
                   nodata=nodata, crs=crs)
