"""End-to-end orchestration: two images + cameras -> DSM (+ evaluation).

Stages: load -> rectify -> match -> triangulate -> dsm -> eval. The
rectified domain is processed in overlapping tiles so arbitrarily large
scenes fit in memory; each tile is matched (forward and swapped for the
left-right consistency check), triangulated and rasterized independently,
and the tile rasters are merged by per-cell median. Every run writes a
``manifest.json`` recording the full configuration, library versions,
per-stage timings and tile outcomes, so results are reproducible from the
manifest alone.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import run_external_matcher
from .config import PipelineConfig
from .dsm import (
    DsmGrid,
    disparity_to_points,
    grid_spec_for_cloud,
    load_dsm,
    mosaic,
    rasterize,
    read_geotiff,
    save_dsm,
)
from .errors import (
    ConfigError,
    EmptyField,
    FormatError,
    MissingMetadata,
    SatStereoError,
    StageError,
)
from .evaluation import (
    ClassMap,
    ErrorField,
    classwise_metrics,
    planimetric_align,
    resample_to_gt,
    vertical_align,
)
from .matching import (
    DisparityMap,
    ExternalMatcherSpec,
    NativeMatcherSpec,
    lr_consistency_filter,
    normalize_sign,
    run_native_matcher,
)
from .pfm import read_pfm, write_pfm
from .rectification import RectifyingPair, build_rectification, rectify_image
from .report import write_report
from .rpc import load_rpc

log = logging.getLogger(__name__)

# Extra rectified pixels added around each tile crop so census windows and
# SGM paths see the same neighborhood they would in an untiled run.
TILE_CONTEXT_PX = 16

FAVORABLE_BASELINE_DEG = (5.0, 45.0)
MAX_FAVORABLE_INCIDENCE_DEG = 40.0


class PairClass(enum.Enum):
    """Acquisition-geometry quality bucket of a stereo pair."""

    FAVORABLE = "favorable"
    CHALLENGING = "challenging"


@dataclass(frozen=True)
class PairMetadata:
    """Acquisition geometry of a candidate stereo pair.

    Angles are in degrees, the acquisition gap in seconds; ``None`` marks
    metadata that is not available (classification then fails with
    MissingMetadata rather than guessing).
    """

    incidence_1: float | None
    incidence_2: float | None
    baseline_angle: float | None
    acquisition_gap_s: float | None = None
    image_id_1: str = ""
    image_id_2: str = ""

    def __post_init__(self) -> None:
        # NaN means "missing" (like None) and is caught at classification
        # time, not here.
        for name in ("incidence_1", "incidence_2", "baseline_angle"):
            v = getattr(self, name)
            if (v is not None and math.isfinite(v)
                    and not 0.0 <= v <= 90.0):
                raise ConfigError(f"{name} must be in [0, 90] deg, got {v}")
        gap = self.acquisition_gap_s
        if gap is not None and math.isfinite(gap) and gap < 0:
            raise ConfigError(f"acquisition_gap_s must be >= 0, got {gap}")


def classify_pair(meta: PairMetadata) -> PairClass:
    """Bucket a pair by acquisition geometry.

    Favorable requires a convergence (baseline) angle between 5 and 45
    degrees inclusive AND both incidence angles strictly below 40 degrees;
    anything else is challenging.

    Raises:
        MissingMetadata: any required angle is None or NaN.
    """
    required = (meta.incidence_1, meta.incidence_2, meta.baseline_angle)
    if any(v is None or not math.isfinite(v) for v in required):
        raise MissingMetadata(
            "pair classification needs incidence_1, incidence_2 and "
            "baseline_angle")
    lo, hi = FAVORABLE_BASELINE_DEG
    if (lo <= meta.baseline_angle <= hi
            and max(meta.incidence_1, meta.incidence_2)
            < MAX_FAVORABLE_INCIDENCE_DEG):
        return PairClass.FAVORABLE
    return PairClass.CHALLENGING


def estimate_pair_geometry(rpc1, rpc2) -> PairMetadata:
    """Approximate acquisition angles from the cameras themselves.

    The viewing ray at each camera's reference point is recovered by
    localizing the center pixel at two altitudes; the incidence angle is
    the ray's tilt from vertical and the baseline angle is the angle
    between the two rays. Exact for affine cameras, a good local
    approximation otherwise.
    """
    from .geometry import local_metric

    rays = []
    for rpc in (rpc1, rpc2):
        dalt = 0.25 * rpc.alt_scale
        lo, hi = rpc.alt_off - dalt, rpc.alt_off + dalt
        col, row = rpc.samp_off, rpc.line_off
        lon_lo, lat_lo = rpc.localize(col, row, lo)
        lon_hi, lat_hi = rpc.localize(col, row, hi)
        m_lon, m_lat = local_metric(rpc.lat_off)
        ray = np.array([
            float(lon_hi - lon_lo) * m_lon,
            float(lat_hi - lat_lo) * m_lat,
            hi - lo,
        ])
        rays.append(ray / np.linalg.norm(ray))
    incidences = [math.degrees(math.acos(min(1.0, abs(r[2])))) for r in rays]
    cos_b = float(np.clip(np.dot(rays[0], rays[1]), -1.0, 1.0))
    return PairMetadata(incidence_1=incidences[0], incidence_2=incidences[1],
                        baseline_angle=math.degrees(math.acos(cos_b)))


def tile_roi(width: int, height: int, tile: int, overlap: int):
    """Cover a width x height raster with overlapping tiles.

    Tiles are ``tile`` pixels on a side, consecutive tiles advance by
    ``tile - overlap``, and the trailing tiles are clipped to the raster.
    Returns a list of (x0, y0, x1, y1) boxes, half-open, row-major.
    """
    if tile < 1:
        raise ConfigError(f"tile size must be >= 1, got {tile}")
    if not 0 <= overlap < tile:
        raise ConfigError(
            f"overlap must satisfy 0 <= overlap < tile, got {overlap}")
    if width < 1 or height < 1:
        raise ConfigError(f"raster must be non-empty, got {width}x{height}")

    def starts(size):
        step = tile - overlap
        out = [0]
        while out[-1] + tile < size:
            out.append(out[-1] + step)
        return out

    return [(x0, y0, min(x0 + tile, width), min(y0 + tile, height))
            for y0 in starts(height) for x0 in starts(width)]


@dataclass(frozen=True)
class PipelineResult:
    """Artifacts of one pipeline run."""

    dsm: DsmGrid
    dsm_path: Path
    manifest: dict
    manifest_path: Path
    report: object | None = None
    report_paths: tuple = ()
    failed_tiles: tuple = ()
    elapsed_s: float = 0.0


@contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except (SatStereoError, OSError) as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = round(
            timings.get(name, 0.0) + time.perf_counter() - t0, 6)


def _load_image(path: Path) -> np.ndarray:
    """Read an intensity raster: PFM directly, anything else via Pillow."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float32)
    except UnidentifiedImageError as exc:
        raise FormatError(f"unsupported image format: {path}") from exc
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise FormatError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def _dispatch_matcher(spec, left, right, dmin, dmax) -> DisparityMap:
    if isinstance(spec, NativeMatcherSpec):
        return run_native_matcher(spec, left, right, dmin, dmax)
    if isinstance(spec, ExternalMatcherSpec):
        return normalize_sign(
            run_external_matcher(spec, left, right, dmin, dmax))
    raise ConfigError(f"unsupported matcher spec {type(spec).__name__}")


def _match_tile(cfg: PipelineConfig, pair: RectifyingPair, rect1, rect2,
                box) -> DisparityMap:
    """Match one tile inside an expanded crop; returns the tile-sized map.

    The crop widens the tile by the full disparity span plus context on
    the columns (so every hypothesis can be evaluated) and by context on
    the rows, in both images; the disparity search range itself is the
    global one, which keeps tile results consistent with an untiled run.
    """
    x0, y0, x1, y1 = box
    h, w = rect1.shape
    span = int(math.ceil(max(abs(pair.disp_min), abs(pair.disp_max))))
    cx0 = max(0, x0 - span - TILE_CONTEXT_PX)
    cx1 = min(w, x1 + span + TILE_CONTEXT_PX)
    cy0 = max(0, y0 - TILE_CONTEXT_PX)
    cy1 = min(h, y1 + TILE_CONTEXT_PX)
    left = rect1[cy0:cy1, cx0:cx1]
    right = rect2[cy0:cy1, cx0:cx1]
    forward = normalize_sign(_dispatch_matcher(
        cfg.matcher, left, right, pair.disp_min, pair.disp_max))
    swapped = normalize_sign(_dispatch_matcher(
        cfg.matcher, right, left, -pair.disp_max, -pair.disp_min))
    filtered = lr_consistency_filter(forward, swapped, cfg.lr_threshold_px)
    sub = filtered.values[y0 - cy0:y1 - cy0, x0 - cx0:x1 - cx0]
    return DisparityMap.from_values(sub)


def _process_tile(cfg, pair, rect1, rect2, rpc1, rpc2, box):
    """Tile worker: match, triangulate, rasterize. None when empty."""
    try:
        disp = _match_tile(cfg, pair, rect1, rect2, box)
    except SatStereoError as exc:
        raise StageError("match", exc) from exc
    try:
        cloud = disparity_to_points(
            disp, pair, rpc1, rpc2, alt_lo=cfg.roi.alt_lo,
            alt_hi=cfg.roi.alt_hi, origin_col=box[0], origin_row=box[1])
        if len(cloud) == 0:
            return disp, None
        spec = grid_spec_for_cloud(cloud, cfg.cell_m)
        grid = rasterize(cloud, *spec, cell=cfg.cell_m, crs=cloud.zone)
    except SatStereoError as exc:
        raise StageError("triangulate", exc) from exc
    return disp, grid


def _load_grid(path: Path) -> DsmGrid:
    if Path(path).suffix.lower() in (".tif", ".tiff"):
        return read_geotiff(path)
    return load_dsm(path)


def _versions() -> dict:
    import platform

    import scipy

    return {
        "satstereo": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Run the full stereo pipeline described by ``cfg``.

    Writes into ``cfg.output_dir``: ``dsm.pfm`` (+ georeferencing
    sidecar), ``manifest.json``, and, when ground truth is configured, the
    evaluation report bundle (metrics.tsv, aggregate.tsv, report.txt,
    figures). Returns the in-memory artifacts.

    Raises:
        StageError: any stage failure, tagged with the stage name; the
            original exception is available as ``.cause``.
    """
    t_start = time.perf_counter()
    timings: dict = {}
    manifest: dict = {"config": cfg.manifest_dict(), "versions": _versions()}
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    with _stage("load", timings):
        img1 = _load_image(cfg.image1)
        img2 = _load_image(cfg.image2)
        rpc1 = load_rpc(cfg.rpc1)
        rpc2 = load_rpc(cfg.rpc2)

    with _stage("rectify", timings):
        pair = build_rectification(
            rpc1, rpc2, img1, img2, cfg.roi,
            polarity_hint=cfg.polarity_hint if cfg.polarity_hint else 1,
            margin=cfg.margin_px)
        rect1 = rectify_image(img1, pair.h1, pair.out_width, pair.out_height)
        rect2 = rectify_image(img2, pair.h2, pair.out_width, pair.out_height)
    log.info("rectified %dx%d canvas, disparity range [%.2f, %.2f]",
             pair.out_width, pair.out_height, pair.disp_min, pair.disp_max)
    manifest["rectification"] = {
        "polarity": pair.polarity,
        "disp_min": pair.disp_min,
        "disp_max": pair.disp_max,
        "margin_applied": pair.margin_applied,
        "out_width": pair.out_width,
        "out_height": pair.out_height,
        "shear_applied": pair.shear_applied,
        "shift_applied": pair.shift_applied,
    }
    if cfg.save_intermediates:
        write_pfm(outdir / "rect1.pfm", rect1.astype(np.float32))
        write_pfm(outdir / "rect2.pfm", rect2.astype(np.float32))

    boxes = tile_roi(pair.out_width, pair.out_height, cfg.tile_px,
                     cfg.overlap_px)
    log.info("matching %d tile(s) of %d px (overlap %d px)", len(boxes),
             cfg.tile_px, cfg.overlap_px)
    tile_grids: list = [None] * len(boxes)
    tile_disps: list = [None] * len(boxes)
    failed: list = []

    t_tiles = time.perf_counter()
    workers = cfg.workers or os.cpu_count() or 1

    def worker(box):
        return _process_tile(cfg, pair, rect1, rect2, rpc1, rpc2, box)

    def record(idx, outcome):
        try:
            tile_disps[idx], tile_grids[idx] = outcome()
        except StageError as exc:
            if not cfg.skip_failed_tiles:
                raise
            failed.append({"index": idx, "box": list(boxes[idx]),
                           "stage": exc.stage, "error": str(exc.cause)})

    try:
        if workers == 1:
            for idx, box in enumerate(boxes):
                record(idx, lambda: worker(box))
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(worker, box) for box in boxes]
                for idx, fut in enumerate(futures):
                    record(idx, fut.result)
    finally:
        timings["match+triangulate"] = round(time.perf_counter() - t_tiles, 6)

    manifest["tiles"] = {
        "count": len(boxes),
        "boxes": [list(b) for b in boxes],
        "failed": failed,
    }

    with _stage("dsm", timings):
        grids = [g for g in tile_grids if g is not None]
        if not grids:
            raise EmptyField(
                "no tile produced any 3-D points; nothing to rasterize")
        dsm = mosaic(grids)
        dsm_path = outdir / "dsm.pfm"
        save_dsm(dsm_path, dsm)
    log.info("DSM %dx%d cells at %.2f m, %d valid, saved to %s", dsm.width,
             dsm.height, dsm.cell, int(dsm.valid.sum()), dsm_path)
    if cfg.save_intermediates:
        _save_disparity_mosaic(outdir / "disparity.pfm", tile_disps, boxes,
                               pair.out_width, pair.out_height)
    manifest["dsm"] = {
        "path": dsm_path.name,
        "origin_e": dsm.origin_e,
        "origin_n": dsm.origin_n,
        "cell": dsm.cell,
        "width": dsm.width,
        "height": dsm.height,
        "crs": dsm.crs,
        "valid_cells": int(dsm.valid.sum()),
    }

    report = None
    report_paths: tuple = ()
    if cfg.gt_dsm is not None:
        with _stage("eval", timings):
            report, report_paths, eval_info = evaluate_dsm(cfg, dsm, outdir)
        manifest["eval"] = eval_info
        log.info("evaluation: vertical offset %.3f m, report in %s",
                 eval_info["offset_m"], outdir)

    elapsed = time.perf_counter() - t_start
    manifest["timings_s"] = timings
    manifest["elapsed_s"] = round(elapsed, 6)
    manifest_path = outdir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True)
                             + "\n")
    return PipelineResult(dsm=dsm, dsm_path=dsm_path, manifest=manifest,
                          manifest_path=manifest_path, report=report,
                          report_paths=report_paths,
                          failed_tiles=tuple(failed), elapsed_s=elapsed)


def _save_disparity_mosaic(path, tile_disps, boxes, width, height):
    """Paste the per-tile filtered disparities into one debug raster."""
    full = np.full((height, width), np.nan, np.float32)
    for disp, (x0, y0, x1, y1) in zip(tile_disps, boxes):
        if disp is None:
            continue
        block = full[y0:y1, x0:x1]
        full[y0:y1, x0:x1] = np.where(disp.valid, disp.values, block)
    write_pfm(path, full)


def evaluate_dsm(cfg: PipelineConfig, dsm: DsmGrid, outdir: Path):
    """Compare a DSM against the configured ground truth; write the report.

    Resamples the DSM onto the ground-truth lattice, optionally registers
    it planimetrically, removes the median vertical offset, computes
    overall and per-class metrics, and writes the report bundle into
    ``outdir``.

    Returns:
        (report, paths, info): the MetricsReport, the written file paths,
        and a JSON-ready summary for the manifest.
    """
    gt = _load_grid(cfg.gt_dsm)
    resampled = resample_to_gt(dsm, gt)
    shift = None
    if cfg.planimetric_align:
        resampled, shift = planimetric_align(resampled, gt)
    aligned, offset = vertical_align(resampled, gt)
    fld = ErrorField.from_grids(aligned, gt)
    cm = None
    if cfg.class_map is not None:
        class_grid = _load_grid(cfg.class_map)
        if (class_grid.width, class_grid.height) != (gt.width, gt.height):
            raise ConfigError(
                f"class map is {class_grid.width}x{class_grid.height} but "
                f"ground truth is {gt.width}x{gt.height}")
        raster = np.where(np.isfinite(class_grid.values),
                          class_grid.values, -1).astype(np.int64)
        cm = ClassMap(raster=raster, names=dict(cfg.class_names),
                      aggregates=dict(cfg.aggregates))
    report = classwise_metrics(fld, cm, gt_valid=gt.valid, offset=offset,
                               scene=cfg.scene)
    paths = write_report(outdir, [report], dsm=aligned, gt=gt, field=fld)
    info = {
        "offset_m": offset,
        "planimetric_shift_cells": list(shift) if shift is not None else None,
        "report_files": [p.name for p in paths],
    }
    return report, tuple(paths), info
