"""Session-scoped fixtures: one rendered box scene shared by the
pipeline and acceptance tests, plus a baseline end-to-end run."""

import time
from dataclasses import replace

import pytest

from satstereo.config import load_config
from satstereo.pipeline import run_pipeline
from satstereo.synthetic import make_box_scene, write_scene


@pytest.fixture(scope="session")
def box_scene(tmp_path_factory):
    """A rendered two-box scene on disk plus its in-memory ground truth."""
    outdir = tmp_path_factory.mktemp("box-scene")
    scene = make_box_scene(seed=11)
    config_path = write_scene(outdir, scene)
    return {"dir": outdir, "config_path": config_path, "scene": scene,
            "config": load_config(config_path)}


@pytest.fixture(scope="session")
def baseline_run(box_scene):
    """One untiled end-to-end run of the box scene, with wall time."""
    cfg = replace(box_scene["config"],
                  output_dir=box_scene["dir"] / "baseline")
    t0 = time.perf_counter()
    result = run_pipeline(cfg)
    elapsed = time.perf_counter() - t0
    return {"cfg": cfg, "result": result, "elapsed_s": elapsed}


@pytest.fixture(scope="session")
def tiled_run(box_scene):
    """The same scene processed in small overlapping tiles, two workers."""
    cfg = replace(box_scene["config"], tile_px=256, overlap_px=64,
                  workers=2, output_dir=box_scene["dir"] / "tiled")
    return {"cfg": cfg, "result": run_pipeline(cfg)}
