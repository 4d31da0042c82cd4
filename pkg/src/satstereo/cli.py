"""Command-line interface.

One executable with a subcommand per pipeline stage plus ``run`` for the
whole chain. Every subcommand reads the same JSON config file; ``run``
additionally accepts flag overrides for the most commonly varied fields.
Logs go to stderr, results to the paths named in the config or flags.

Exit codes: 0 success; 2 configuration problem; 4 external matcher
failure; 3 any other pipeline error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, example_config_dict, load_config
from .dsm import (
    disparity_to_points,
    grid_spec_for_cloud,
    load_dsm,
    mosaic,
    rasterize,
    save_dsm,
)
from .errors import AdapterFailed, ConfigError, SatStereoError, StageError
from .evaluation import OVERALL_SCOPE
from .matching import (
    DisparityMap,
    lr_consistency_filter,
    normalize_sign,
)
from .pfm import read_pfm, write_pfm
from .pipeline import (
    PairMetadata,
    _dispatch_matcher,
    _load_grid,
    _load_image,
    classify_pair,
    evaluate_dsm,
    run_pipeline,
)
from .rectification import RectifyingPair, build_rectification, rectify_image
from .rpc import load_rpc

log = logging.getLogger("satstereo")

_PAIR_FIELDS = ("h1", "h2", "disp_min", "disp_max", "polarity",
                "margin_applied", "out_width", "out_height",
                "shear_applied", "shift_applied")


def _pair_to_dict(pair: RectifyingPair) -> dict:
    out = {}
    for name in _PAIR_FIELDS:
        value = getattr(pair, name)
        out[name] = value.tolist() if isinstance(value, np.ndarray) else value
    return out


def _pair_from_dict(data: dict) -> RectifyingPair:
    missing = [k for k in _PAIR_FIELDS if k not in data]
    if missing:
        raise ConfigError(f"rectification file is missing fields: {missing}")
    return RectifyingPair(**{k: data[k] for k in _PAIR_FIELDS})


def _load_rectification(path) -> RectifyingPair:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read rectification file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return _pair_from_dict(data)


def _cmd_example_config(args) -> int:
    json.dump(example_config_dict(), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _cmd_rectify(args) -> int:
    cfg = load_config(args.config)
    outdir = Path(args.out or cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    img1 = _load_image(cfg.image1)
    img2 = _load_image(cfg.image2)
    pair = build_rectification(
        load_rpc(cfg.rpc1), load_rpc(cfg.rpc2), img1, img2, cfg.roi,
        polarity_hint=cfg.polarity_hint if cfg.polarity_hint else 1,
        margin=cfg.margin_px)
    rect1 = rectify_image(img1, pair.h1, pair.out_width, pair.out_height)
    rect2 = rectify_image(img2, pair.h2, pair.out_width, pair.out_height)
    write_pfm(outdir / "rect1.pfm", rect1.astype(np.float32))
    write_pfm(outdir / "rect2.pfm", rect2.astype(np.float32))
    (outdir / "rectification.json").write_text(
        json.dumps(_pair_to_dict(pair), indent=2) + "\n")
    log.info("rectified pair written to %s (range [%.2f, %.2f])", outdir,
             pair.disp_min, pair.disp_max)
    return 0


def _cmd_match(args) -> int:
    cfg = load_config(args.config)
    left = read_pfm(args.left)
    right = read_pfm(args.right)
    forward = normalize_sign(_dispatch_matcher(
        cfg.matcher, left, right, args.disp_min, args.disp_max))
    swapped = normalize_sign(_dispatch_matcher(
        cfg.matcher, right, left, -args.disp_max, -args.disp_min))
    filtered = lr_consistency_filter(forward, swapped, cfg.lr_threshold_px)
    write_pfm(args.out, filtered.values)
    log.info("disparity map %s: %.1f%% valid", args.out,
             100.0 * filtered.valid_fraction)
    return 0


def _cmd_triangulate(args) -> int:
    cfg = load_config(args.config)
    pair = _load_rectification(args.rectification)
    disp = DisparityMap.from_values(read_pfm(args.disparity))
    cloud = disparity_to_points(
        disp, pair, load_rpc(cfg.rpc1), load_rpc(cfg.rpc2),
        alt_lo=cfg.roi.alt_lo, alt_hi=cfg.roi.alt_hi)
    if len(cloud) == 0:
        raise SatStereoError("no valid 3-D points; nothing to rasterize")
    spec = grid_spec_for_cloud(cloud, cfg.cell_m)
    grid = rasterize(cloud, *spec, cell=cfg.cell_m, crs=cloud.zone)
    save_dsm(args.out, grid)
    log.info("DSM %dx%d written to %s", grid.width, grid.height, args.out)
    return 0


def _cmd_dsm(args) -> int:
    grids = [_load_grid(p) for p in args.tiles]
    merged = mosaic(grids)
    save_dsm(args.out, merged)
    log.info("mosaic of %d tile(s): %dx%d cells, %d valid", len(grids),
             merged.width, merged.height, int(merged.valid.sum()))
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if cfg.gt_dsm is None:
        raise ConfigError("eval requires gt_dsm in the config")
    dsm = _load_grid(args.dsm)
    outdir = Path(args.out or cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    report, paths, info = evaluate_dsm(cfg, dsm, outdir)
    log.info("vertical offset %.3f m; wrote %s", info["offset_m"],
             ", ".join(p.name for p in paths))
    overall = report.scopes.get(OVERALL_SCOPE)
    if overall is not None:
        print(f"Overall: MAE {overall.mae:.3f} m, RMSE {overall.rmse:.3f} m, "
              f"NMAD {overall.nmad:.3f} m, P90 {overall.p90:.3f} m over "
              f"{overall.n_cells} cells")
    return 0


def _cmd_run(args) -> int:
    cfg = _config_with_overrides(args)
    result = run_pipeline(cfg)
    print(f"DSM: {result.dsm_path}")
    print(f"Manifest: {result.manifest_path}")
    if result.failed_tiles:
        print(f"Failed tiles: {len(result.failed_tiles)}", file=sys.stderr)
    if result.report is not None:
        overall = result.report.scopes.get(OVERALL_SCOPE)
        if overall is not None:
            print(f"Overall MAE {overall.mae:.3f} m over "
                  f"{overall.n_cells} cells "
                  f"(offset {result.manifest['eval']['offset_m']:.3f} m)")
    return 0


def _config_with_overrides(args) -> PipelineConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.output_dir is not None:
        overrides["output_dir"] = Path(args.output_dir)
    if args.tile_px is not None:
        overrides["tile_px"] = args.tile_px
    if args.overlap_px is not None:
        overrides["overlap_px"] = args.overlap_px
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.cell_m is not None:
        overrides["cell_m"] = args.cell_m
    if args.scene is not None:
        overrides["scene"] = args.scene
    if args.gt_dsm is not None:
        overrides["gt_dsm"] = Path(args.gt_dsm)
    if args.skip_failed_tiles:
        overrides["skip_failed_tiles"] = True
    if args.save_intermediates:
        overrides["save_intermediates"] = True
    if args.planimetric_align:
        overrides["planimetric_align"] = True
    if not overrides:
        return cfg
    from dataclasses import replace

    return replace(cfg, **overrides)


def _cmd_classify_pairs(args) -> int:
    try:
        data = json.loads(Path(args.pairs).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read pairs file {args.pairs}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.pairs} is not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise ConfigError("pairs file must be a JSON list of objects")
    allowed = {"name", "image_id_1", "image_id_2", "incidence_1",
               "incidence_2", "baseline_angle", "acquisition_gap_s"}
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise ConfigError(f"pair entry {i} must be an object")
        unknown = set(entry) - allowed
        if unknown:
            raise ConfigError(
                f"pair entry {i} has unknown keys: {sorted(unknown)}")
        meta = PairMetadata(
            incidence_1=entry.get("incidence_1"),
            incidence_2=entry.get("incidence_2"),
            baseline_angle=entry.get("baseline_angle"),
            acquisition_gap_s=entry.get("acquisition_gap_s"),
            image_id_1=str(entry.get("image_id_1", "")),
            image_id_2=str(entry.get("image_id_2", "")),
        )
        default = (f"{meta.image_id_1}/{meta.image_id_2}"
                   if meta.image_id_1 or meta.image_id_2 else f"pair-{i}")
        name = str(entry.get("name", default))
        print(f"{name}\t{classify_pair(meta).value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="satstereo",
        description="Satellite stereo: two images + RPC cameras -> DSM")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("example-config",
                       help="print a complete config template to stdout")
    p.set_defaults(func=_cmd_example_config)

    p = sub.add_parser("rectify", help="build and apply the rectification")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.set_defaults(func=_cmd_rectify)

    p = sub.add_parser("match",
                       help="dense matching + consistency filter on a "
                            "rectified pair")
    p.add_argument("--config", required=True)
    p.add_argument("--left", required=True, help="rectified left PFM")
    p.add_argument("--right", required=True, help="rectified right PFM")
    p.add_argument("--disp-min", type=float, required=True)
    p.add_argument("--disp-max", type=float, required=True)
    p.add_argument("--out", required=True, help="output disparity PFM")
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("triangulate",
                       help="disparity map -> gridded DSM")
    p.add_argument("--config", required=True)
    p.add_argument("--disparity", required=True, help="disparity PFM")
    p.add_argument("--rectification", required=True,
                   help="rectification.json from the rectify step")
    p.add_argument("--out", required=True, help="output DSM path")
    p.set_defaults(func=_cmd_triangulate)

    p = sub.add_parser("dsm", help="merge DSM tiles by per-cell median")
    p.add_argument("tiles", nargs="+", help="input DSM paths")
    p.add_argument("--out", required=True, help="output DSM path")
    p.set_defaults(func=_cmd_dsm)

    p = sub.add_parser("eval",
                       help="compare a DSM against ground truth and write "
                            "the report bundle")
    p.add_argument("--config", required=True)
    p.add_argument("--dsm", required=True, help="DSM to evaluate")
    p.add_argument("--out", help="report directory (default: config output_dir)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("run", help="full pipeline: images -> DSM (-> report)")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--tile-px", type=int)
    p.add_argument("--overlap-px", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--cell-m", type=float)
    p.add_argument("--scene")
    p.add_argument("--gt-dsm")
    p.add_argument("--skip-failed-tiles", action="store_true")
    p.add_argument("--save-intermediates", action="store_true")
    p.add_argument("--planimetric-align", action="store_true")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("classify-pairs",
                       help="bucket candidate pairs by acquisition geometry")
    p.add_argument("pairs", help="JSON list of pair metadata objects")
    p.set_defaults(func=_cmd_classify_pairs)

    return parser


def _exit_code(exc: SatStereoError) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, AdapterFailed):
        return 4
    if isinstance(exc, ConfigError):
        return 2
    return 3


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SatStereoError as exc:
        log.error("%s", exc)
        stderr = getattr(exc, "stderr", None) or getattr(
            getattr(exc, "cause", None), "stderr", None)
        if stderr:
            log.error("adapter stderr:\n%s", stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
