"""Synthetic stereo scenes with exactly-known cameras and terrain.

Builds affine pushbroom-like cameras expressed exactly as RPC models, a
piecewise-flat terrain (a plane plus rectangular boxes), and renders the
two views by casting each pixel's ray through the discrete terrain
levels. Because the cameras are exact RPCs and both views sample one
ground-anchored texture, the scene has a closed-form ground truth for
every pipeline stage. ``write_scene`` materializes a complete runnable
input set (images, RPC text files, ground truth, config) on disk.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsm import DsmGrid, grid_spec_for_bounds, save_dsm
from .geometry import geodetic_to_utm, local_metric, utm_to_geodetic
from .pfm import write_pfm
from .rectification import Roi
from .rpc import RpcModel, save_rpc

GROUND_CLASS_ID = 2
ROOF_CLASS_ID = 6
DEFAULT_CLASS_NAMES = {GROUND_CLASS_ID: "Ground", ROOF_CLASS_ID: "Roof",
                       5: "Tree", 9: "Water"}
DEFAULT_AGGREGATES = {"All Except Vegetation and Water": frozenset({5, 9})}


def _unit20(idx: int, value: float = 1.0) -> np.ndarray:
    c = np.zeros(20)
    c[idx] = value
    return c


def affine_rpc(lon0: float, lat0: float, alt0: float, lon_scale: float,
               lat_scale: float, alt_scale: float, gsd: float,
               tan_theta: float, tan_tau: float = 0.0,
               samp_off: float | None = None,
               line_off: float | None = None) -> RpcModel:
    """Affine pushbroom-like camera expressed exactly as an RPC.

    col = samp_off + (dlon * m_lon + tan_theta * dalt) / gsd
    row = line_off + (-dlat * m_lat + tan_tau * dalt) / gsd

    ``tan_theta`` is the cross-track incidence (pixels of disparity per
    meter of height times gsd); ``tan_tau`` the along-track tilt.
    """
    m_lon, m_lat = local_metric(lat0)
    samp_scale = lon_scale * m_lon / gsd
    line_scale = lat_scale * m_lat / gsd
    if samp_off is None:
        samp_off = math.ceil(samp_scale)
    if line_off is None:
        line_off = math.ceil(line_scale)
    samp_num = np.zeros(20)
    samp_num[1] = 1.0
    samp_num[3] = alt_scale * tan_theta / (gsd * samp_scale)
    line_num = np.zeros(20)
    line_num[2] = -1.0
    line_num[3] = alt_scale * tan_tau / (gsd * line_scale)
    return RpcModel(
        line_off=float(line_off), samp_off=float(samp_off),
        lat_off=lat0, lon_off=lon0, alt_off=alt0,
        line_scale=line_scale, samp_scale=samp_scale,
        lat_scale=lat_scale, lon_scale=lon_scale, alt_scale=alt_scale,
        line_num=line_num, line_den=_unit20(0),
        samp_num=samp_num, samp_den=_unit20(0),
    )


@dataclass(frozen=True)
class BoxSpec:
    """A flat-topped rectangular box on the ground plane."""

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    height_m: float

    def contains(self, lon, lat):
        return ((lon >= self.lon_min) & (lon <= self.lon_max)
                & (lat >= self.lat_min) & (lat <= self.lat_max))


def box_terrain(z0: float, boxes):
    """Terrain function: flat plane at z0 with boxes raised on top."""
    boxes = tuple(boxes)

    def terrain(lon, lat):
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        z = np.full(np.broadcast(lon, lat).shape, float(z0))
        for box in boxes:
            z = np.where(box.contains(lon, lat), z0 + box.height_m, z)
        return z

    return terrain


def procedural_texture(seed: int, n_waves: int = 64,
                       freq_lo: float = 10.0, freq_hi: float = 1200.0):
    """Band-rich ground-anchored texture evaluable at any (u, v).

    Coordinates are normalized ground coordinates (offsets over scales),
    so both views of a scene sample the same function. Frequencies up to
    ``freq_hi`` cycles per normalized unit give per-pixel contrast for
    dense matching without aliasing at half-meter sampling.
    """
    rng = np.random.default_rng(seed)
    log_f = rng.uniform(np.log(freq_lo), np.log(freq_hi), size=n_waves)
    freq = np.exp(log_f)[:, None] * _random_directions(rng, n_waves)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
    amp = rng.uniform(0.5, 1.0, size=n_waves) / math.sqrt(n_waves)

    def tex(u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        out = np.zeros(np.broadcast(u, v).shape)
        for k in range(n_waves):
            out += amp[k] * np.cos(
                2.0 * np.pi * (freq[k, 0] * u + freq[k, 1] * v) + phase[k])
        return out

    return tex


def _random_directions(rng, n):
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([np.cos(angle), np.sin(angle)], axis=1)


def render_view(rpc: RpcModel, tex, terrain, levels, width: int,
                height: int) -> np.ndarray:
    """Render one view of piecewise-flat terrain by level-set ray casting.

    For each pixel the viewing ray is intersected with the given altitude
    levels from highest to lowest; the first level whose ground point lies
    at (or under) the terrain surface is the visible one, and the texture
    is sampled at that ground point. Pixels seeing a vertical wall get the
    next surface behind it, which the downstream consistency filters treat
    as occlusion.
    """
    cols, rows = np.meshgrid(np.arange(width, dtype=np.float64),
                             np.arange(height, dtype=np.float64))
    out = np.zeros((height, width))
    remaining = np.ones((height, width), bool)
    for level in sorted(set(float(v) for v in levels), reverse=True):
        lon, lat = rpc.localize(cols, rows, level)
        hit = remaining & (terrain(lon, lat) >= level - 1e-6)
        if np.any(hit):
            u = (lon - rpc.lon_off) / rpc.lon_scale
            v = (lat - rpc.lat_off) / rpc.lat_scale
            out = np.where(hit, tex(u, v), out)
            remaining &= ~hit
    return out.astype(np.float32)


@dataclass(frozen=True, eq=False)
class SceneBundle:
    """A rendered synthetic stereo scene plus its exact ground truth."""

    rpc1: RpcModel
    rpc2: RpcModel
    img1: np.ndarray
    img2: np.ndarray
    roi: Roi
    terrain: object
    boxes: tuple
    z0: float
    meta: dict


def make_box_scene(seed: int = 0, width: int = 512, height: int = 512,
                   z0: float = 40.0, box_heights=(10.0, 20.0),
                   lon0: float = -58.55, lat0: float = -34.45,
                   roi_half: float = 0.0010, alt_lo: float = 0.0,
                   alt_hi: float = 100.0, gsd: float = 0.5,
                   tan_theta1: float = -0.25, tan_theta2: float = 0.25,
                   tan_tau1: float = 0.05, tan_tau2: float = 0.12,
                   ) -> SceneBundle:
    """Flat plane plus two boxes viewed by a convergent synthetic pair."""
    lon_scale, lat_scale, alt_scale = 0.02, 0.02, 400.0
    rpc1 = affine_rpc(lon0, lat0, z0, lon_scale, lat_scale, alt_scale, gsd,
                      tan_theta1, tan_tau1, samp_off=width // 2,
                      line_off=height // 2)
    rpc2 = affine_rpc(lon0, lat0, z0, lon_scale, lat_scale, alt_scale, gsd,
                      tan_theta2, tan_tau2, samp_off=width // 2,
                      line_off=height // 2)
    boxes = (
        BoxSpec(lon_min=lon0 - 0.00062, lon_max=lon0 - 0.00018,
                lat_min=lat0 - 0.00058, lat_max=lat0 - 0.00014,
                height_m=box_heights[0]),
        BoxSpec(lon_min=lon0 + 0.00018, lon_max=lon0 + 0.00062,
                lat_min=lat0 + 0.00014, lat_max=lat0 + 0.00058,
                height_m=box_heights[1]),
    )
    terrain = box_terrain(z0, boxes)
    tex = procedural_texture(seed)
    levels = [z0] + [z0 + b.height_m for b in boxes]
    img1 = render_view(rpc1, tex, terrain, levels, width, height)
    img2 = render_view(rpc2, tex, terrain, levels, width, height)
    roi = Roi(lon_min=lon0 - roi_half, lon_max=lon0 + roi_half,
              lat_min=lat0 - roi_half, lat_max=lat0 + roi_half,
              alt_lo=alt_lo, alt_hi=alt_hi)
    meta = {"gsd": gsd, "tan_theta1": tan_theta1, "tan_theta2": tan_theta2,
            "tan_tau1": tan_tau1, "tan_tau2": tan_tau2,
            "meters_per_disparity_px": gsd / (tan_theta2 - tan_theta1),
            "width": width, "height": height, "seed": seed}
    return SceneBundle(rpc1=rpc1, rpc2=rpc2, img1=img1, img2=img2, roi=roi,
                       terrain=terrain, boxes=boxes, z0=z0, meta=meta)


def _roi_utm_bounds(roi: Roi):
    lons = [roi.lon_min, roi.lon_min, roi.lon_max, roi.lon_max]
    lats = [roi.lat_min, roi.lat_max, roi.lat_min, roi.lat_max]
    e, n, zone = geodetic_to_utm(np.array(lons), np.array(lats))
    return float(e.min()), float(e.max()), float(n.min()), float(n.max()), zone


def ground_truth_grid(scene: SceneBundle, cell: float = 0.5) -> DsmGrid:
    """Rasterize the exact terrain over the scene ROI on a UTM grid."""
    e_min, e_max, n_min, n_max, zone = _roi_utm_bounds(scene.roi)
    origin_e, origin_n, width, height = grid_spec_for_bounds(
        e_min, e_max, n_min, n_max, cell)
    ee, nn = np.meshgrid(origin_e + (np.arange(width) + 0.5) * cell,
                         origin_n - (np.arange(height) + 0.5) * cell)
    lon, lat = utm_to_geodetic(ee.ravel(), nn.ravel(), zone)
    values = scene.terrain(lon, lat).reshape(height, width)
    return DsmGrid(origin_e, origin_n, cell, width, height,
                   values.astype(np.float32), crs=zone)


def class_grid(scene: SceneBundle, cell: float = 0.5) -> DsmGrid:
    """Semantic raster on the ground-truth grid: ground vs box roofs."""
    gt = ground_truth_grid(scene, cell)
    ids = np.where(gt.values > scene.z0 + 1e-3, float(ROOF_CLASS_ID),
                   float(GROUND_CLASS_ID))
    return DsmGrid(gt.origin_e, gt.origin_n, gt.cell, gt.width, gt.height,
                   ids.astype(np.float32), crs=gt.crs)


def write_scene(outdir, scene: SceneBundle, cell: float = 0.5,
                with_classes: bool = True, config_overrides: dict | None = None,
                ) -> Path:
    """Write a complete runnable input set; returns the config path.

    Files: left.pfm/right.pfm (views), left.rpc/right.rpc (cameras),
    gt_dsm.pfm + sidecar (exact terrain), classes.pfm + sidecar
    (optional semantic ids), config.json referencing them all.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_pfm(outdir / "left.pfm", scene.img1)
    write_pfm(outdir / "right.pfm", scene.img2)
    save_rpc(outdir / "left.rpc", scene.rpc1)
    save_rpc(outdir / "right.rpc", scene.rpc2)
    save_dsm(outdir / "gt_dsm.pfm", ground_truth_grid(scene, cell))
    config = {
        "image1": "left.pfm", "image2": "right.pfm",
        "rpc1": "left.rpc", "rpc2": "right.rpc",
        "roi": {k: getattr(scene.roi, k) for k in
                ("lon_min", "lon_max", "lat_min", "lat_max",
                 "alt_lo", "alt_hi")},
        "output_dir": "out",
        "matcher": {"kind": "native"},
        "cell_m": cell,
        "gt_dsm": "gt_dsm.pfm",
        "scene": "synthetic-boxes",
        "workers": 1,
    }
    if with_classes:
        save_dsm(outdir / "classes.pfm", class_grid(scene, cell))
        config["class_map"] = "classes.pfm"
        config["class_names"] = {str(k): v
                                 for k, v in DEFAULT_CLASS_NAMES.items()}
        config["aggregates"] = {name: sorted(ids) for name, ids
                                in DEFAULT_AGGREGATES.items()}
    if config_overrides:
        config.update(config_overrides)
    config_path = outdir / "config.json"
    config_path.write_text(json.dumps(config, indent=2) + "\n")
    return config_path
