"""External stereo matchers behind a file-exchange subprocess protocol.

Invocation contract: ``<command> <left.pfm> <right.pfm> <dmin> <dmax>
<out.pfm>``, exit code 0 on success, output raster the same size as the
left input. Command tokens may instead carry the placeholders ``{left}
{right} {dmin} {dmax} {out}`` to control argument order. Each invocation
gets a private scratch directory (under ``$SATSTEREO_SCRATCH`` when set)
that is removed afterwards, and at most a configurable number of adapter
processes run concurrently.
"""

from __future__ import annotations

import os
import shutil
import subprocess
import tempfile
import threading

import numpy as np

from .errors import AdapterFailed, ConfigError, FormatError
from .matching import DisparityMap, ExternalMatcherSpec
from .pfm import read_pfm, write_pfm

__all__ = [
    "DEFAULT_MAX_CONCURRENT_ADAPTERS",
    "SCRATCH_ENV_VAR",
    "run_external_matcher",
    "set_max_concurrent_adapters",
]

DEFAULT_MAX_CONCURRENT_ADAPTERS = 2
SCRATCH_ENV_VAR = "SATSTEREO_SCRATCH"

_PLACEHOLDERS = ("{left}", "{right}", "{dmin}", "{dmax}", "{out}")

_semaphore = threading.BoundedSemaphore(DEFAULT_MAX_CONCURRENT_ADAPTERS)


def set_max_concurrent_adapters(n: int) -> None:
    """Cap the number of adapter subprocesses that may run at once."""
    global _semaphore
    if n < 1:
        raise ConfigError(f"adapter concurrency must be >= 1, got {n}")
    _semaphore = threading.BoundedSemaphore(n)


def _format_bound(value: float) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def _build_argv(command: tuple[str, ...], left: str, right: str,
                dmin: str, dmax: str, out: str) -> list[str]:
    substitutions = {"{left}": left, "{right}": right, "{dmin}": dmin,
                     "{dmax}": dmax, "{out}": out}
    if any(ph in token for token in command for ph in _PLACEHOLDERS):
        argv = []
        for token in command:
            for ph, value in substitutions.items():
                token = token.replace(ph, value)
            argv.append(token)
        return argv
    return list(command) + [left, right, dmin, dmax, out]


def _scratch_dir() -> str:
    root = os.environ.get(SCRATCH_ENV_VAR)
    if root:
        os.makedirs(root, exist_ok=True)
    return tempfile.mkdtemp(prefix="satstereo-adapter-", dir=root or None)


def run_external_matcher(spec: ExternalMatcherSpec, rect_left: np.ndarray,
                         rect_right: np.ndarray, disp_min: float,
                         disp_max: float) -> DisparityMap:
    """Run an external matcher process on a rectified pair.

    Both rectified rasters are written to a private scratch directory in
    the PFM exchange format (NaN no-data preserved bit-exactly), the
    command is invoked with the substituted arguments, and its output
    raster is read back. Non-finite output values become invalid pixels;
    the result carries the convention declared in ``spec`` (callers
    normalize with :func:`satstereo.matching.normalize_sign`).

    Raises:
        AdapterFailed: nonzero exit (stderr attached), timeout, missing or
            malformed output raster, or output size mismatch.
    """
    rect_left = np.asarray(rect_left, np.float32)
    rect_right = np.asarray(rect_right, np.float32)
    scratch = _scratch_dir()
    try:
        left_path = os.path.join(scratch, "left.pfm")
        right_path = os.path.join(scratch, "right.pfm")
        out_path = os.path.join(scratch, "out.pfm")
        write_pfm(left_path, rect_left)
        write_pfm(right_path, rect_right)
        argv = _build_argv(spec.command, left_path, right_path,
                           _format_bound(disp_min), _format_bound(disp_max),
                           out_path)
        try:
            with _semaphore:
                proc = subprocess.run(argv, capture_output=True,
                                      timeout=spec.timeout)
        except subprocess.TimeoutExpired as exc:
            stderr = exc.stderr.decode("utf-8", "replace") if exc.stderr else None
            raise AdapterFailed(
                f"adapter timed out after {spec.timeout} s: {argv[0]}",
                stderr=stderr) from exc
        except OSError as exc:
            raise AdapterFailed(
                f"adapter could not be executed: {exc}") from exc
        stderr = proc.stderr.decode("utf-8", "replace")
        if proc.returncode != 0:
            raise AdapterFailed(
                f"adapter exit code {proc.returncode}: {argv[0]}",
                stderr=stderr)
        if not os.path.exists(out_path):
            raise AdapterFailed(
                f"adapter produced no output raster at {out_path}",
                stderr=stderr)
        try:
            values = read_pfm(out_path)
        except (FormatError, OSError, ValueError) as exc:
            raise AdapterFailed(
                f"adapter output raster is malformed: {exc}",
                stderr=stderr) from exc
        if values.shape != rect_left.shape:
            raise AdapterFailed(
                f"adapter output size mismatch: got {values.shape[1]}x"
                f"{values.shape[0]}, expected {rect_left.shape[1]}x"
                f"{rect_left.shape[0]}", stderr=stderr)
        return DisparityMap.from_values(values.astype(np.float32),
                                        spec.convention)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
