"""PFM (portable float map) reader and writer.

This is the raster exchange format of the pipeline: rectified images,
disparity maps and DSM grids all travel as single-channel PFM. The format is
three ASCII header lines followed by raw 32-bit floats:

    Pf
    <width> <height>
    <scale>            # negative: little-endian, positive: big-endian

Pixel rows are stored bottom row first. Writing defaults to little-endian
(scale -1.0); reading accepts either byte order. Round trips are bit-exact,
including NaN payloads used as the no-data sentinel.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError

__all__ = ["read_pfm", "write_pfm"]


def write_pfm(path, data, big_endian: bool = False) -> None:
    """Write a 2D float32 array to ``path`` as a grayscale PFM.

    Args:
        path: output file path.
        data: 2D array; cast to float32 if needed.
        big_endian: write big-endian samples with a positive scale marker.
    """
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise FormatError(f"PFM writer expects a 2D array, got shape {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    arr = arr.astype("<f4", copy=False)
    if big_endian:
        arr = arr.byteswap().view(">f4")
    h, w = arr.shape
    scale = 1.0 if big_endian else -1.0
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(f"{scale:.1f}\n".encode("ascii"))
        # bottom row first
        f.write(np.flipud(arr).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a float32 array (top row first).

    Accepts both endianness markers. Color ("PF") files are rejected: the
    pipeline exchanges single-band rasters only.
    """
    with open(path, "rb") as f:
        magic = _read_header_line(f, path)
        if magic == "PF":
            raise FormatError(f"{path}: color PFM not supported (expected 'Pf')")
        if magic != "Pf":
            raise FormatError(f"{path}: not a PFM file (magic {magic!r})")
        dims = _read_header_line(f, path).split()
        if len(dims) != 2:
            raise FormatError(f"{path}: malformed PFM dimension line {dims!r}")
        try:
            w, h = int(dims[0]), int(dims[1])
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PFM dimensions") from exc
        if w <= 0 or h <= 0:
            raise FormatError(f"{path}: non-positive PFM dimensions {w}x{h}")
        try:
            scale = float(_read_header_line(f, path))
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PFM scale line") from exc
        if scale == 0.0:
            raise FormatError(f"{path}: PFM scale must be nonzero")
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read(w * h * 4)
        if len(raw) != w * h * 4:
            raise FormatError(
                f"{path}: truncated PFM payload ({len(raw)} of {w * h * 4} bytes)"
            )
    arr = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    if scale >= 0:
        # byteswap + view keeps the bit pattern intact (astype may quiet NaNs)
        arr = arr.byteswap().view("<f4")
    return np.ascontiguousarray(np.flipud(arr)).view(np.float32)


def _read_header_line(f, path) -> str:
    line = f.readline()
    if not line:
        raise FormatError(f"{path}: truncated PFM header")
    return line.decode("ascii", errors="replace").strip()
