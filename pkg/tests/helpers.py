"""Shared fixtures: synthetic affine stereo RPC pairs with known geometry."""

import math

import numpy as np

from satstereo.geometry import local_metric
from satstereo.rpc import RpcModel


def unit20(idx, value=1.0):
    c = np.zeros(20)
    c[idx] = value
    return c


def make_affine_rpc(lon0, lat0, alt0, lon_scale, lat_scale, alt_scale,
                    gsd, tan_theta, tan_tau=0.0, samp_off=None, line_off=None):
    """Affine pushbroom-like camera expressed exactly as an RPC.

    col = samp_off + (dlon * m_lon + tan_theta * dalt) / gsd
    row = line_off + (-dlat * m_lat + tan_tau * dalt) / gsd

    tan_theta is the cross-track incidence (disparity per meter of height);
    tan_tau the along-track tilt.
    """
    m_lon, m_lat = local_metric(lat0)
    samp_scale = lon_scale * m_lon / gsd
    line_scale = lat_scale * m_lat / gsd
    if samp_off is None:
        samp_off = math.ceil(samp_scale)
    if line_off is None:
        line_off = math.ceil(line_scale)
    samp_num = np.zeros(20)
    samp_num[1] = 1.0                                   # L term
    samp_num[3] = alt_scale * tan_theta / (gsd * samp_scale)
    line_num = np.zeros(20)
    line_num[2] = -1.0                                  # P term
    line_num[3] = alt_scale * tan_tau / (gsd * line_scale)
    return RpcModel(
        line_off=float(line_off), samp_off=float(samp_off),
        lat_off=lat0, lon_off=lon0, alt_off=alt0,
        line_scale=line_scale, samp_scale=samp_scale,
        lat_scale=lat_scale, lon_scale=lon_scale, alt_scale=alt_scale,
        line_num=line_num, line_den=unit20(0),
        samp_num=samp_num, samp_den=unit20(0),
    )


def make_stereo_rpcs(tan_theta1=-0.20, tan_theta2=0.18, tan_tau=0.05,
                     tan_tau2=None, lon0=-58.55, lat0=-34.45, alt0=35.0,
                     lon_scale=0.02, lat_scale=0.02, alt_scale=400.0,
                     gsd=0.5, samp_off=None, line_off=None):
    """Convergent affine stereo pair sharing ground offsets and scales."""
    if tan_tau2 is None:
        tan_tau2 = tan_tau
    rpc1 = make_affine_rpc(lon0, lat0, alt0, lon_scale, lat_scale, alt_scale,
                           gsd, tan_theta1, tan_tau, samp_off, line_off)
    rpc2 = make_affine_rpc(lon0, lat0, alt0, lon_scale, lat_scale, alt_scale,
                           gsd, tan_theta2, tan_tau2, samp_off, line_off)
    meta = {
        "lon0": lon0, "lat0": lat0, "alt0": alt0, "gsd": gsd,
        "tan_theta1": tan_theta1, "tan_theta2": tan_theta2,
        "tan_tau": tan_tau, "tan_tau2": tan_tau2,
    }
    return rpc1, rpc2, meta


def make_texture(seed, n_waves=40):
    """Smooth procedural texture evaluable at any normalized ground coords."""
    rng = np.random.default_rng(seed)
    freq = rng.uniform(3.0, 40.0, size=(n_waves, 2))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
    amp = rng.uniform(0.5, 1.0, size=n_waves) / math.sqrt(n_waves)

    def tex(u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        out = np.zeros(np.broadcast(u, v).shape)
        for k in range(n_waves):
            out += amp[k] * np.cos(
                2.0 * np.pi * (freq[k, 0] * u + freq[k, 1] * v) + phase[k]
            )
        return out

    return tex


def render_flat_view(rpc, tex, z0, width, height):
    """Render a view of flat terrain at altitude z0 with the given texture."""
    cols, rows = np.meshgrid(np.arange(width, dtype=np.float64),
                             np.arange(height, dtype=np.float64))
    lon, lat = rpc.localize(cols, rows, z0)
    u = (lon - rpc.lon_off) / rpc.lon_scale
    v = (lat - rpc.lat_off) / rpc.lat_scale
    return tex(u, v).astype(np.float32)


def make_scene(seed=0, width=420, height=420, z0=40.0,
               alt_lo=0.0, alt_hi=120.0, roi_half=0.0012, tan_tau2=0.12):
    """Flat-terrain stereo scene with RPC-consistent rendered views."""
    from satstereo.rectification import Roi

    rpc1, rpc2, meta = make_stereo_rpcs(samp_off=width // 2,
                                        line_off=height // 2,
                                        tan_tau2=tan_tau2)
    tex = make_texture(seed)
    img1 = render_flat_view(rpc1, tex, z0, width, height)
    img2 = render_flat_view(rpc2, tex, z0, width, height)
    roi = Roi(
        lon_min=meta["lon0"] - roi_half, lon_max=meta["lon0"] + roi_half,
        lat_min=meta["lat0"] - roi_half, lat_max=meta["lat0"] + roi_half,
        alt_lo=alt_lo, alt_hi=alt_hi,
    )
    meta = dict(meta, z0=z0, tex=tex, width=width, height=height)
    return rpc1, rpc2, img1, img2, roi, meta


ECHO_MATCHER_SRC = '''#!/usr/bin/env python3
"""Test adapter: constant disparity at the midpoint of the search range.

Follows the file-exchange protocol: argv is <left.pfm> <right.pfm>
<dmin> <dmax> <out.pfm>. When the environment variable
SATSTEREO_TEST_FAIL_ONCE names a path that does not exist yet, the
invocation creates it and exits 3 instead (simulating a crash once).
"""
import os
import struct
import sys


def read_dims(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            sys.exit("not a grayscale PFM")
        w, h = map(int, f.readline().split())
        float(f.readline())
        return w, h


def main():
    left, right, dmin, dmax, out = sys.argv[1:6]
    marker = os.environ.get("SATSTEREO_TEST_FAIL_ONCE")
    if marker and not os.path.exists(marker):
        open(marker, "w").close()
        sys.stderr.write("injected failure\\n")
        return 3
    w, h = read_dims(left)
    value = (float(dmin) + float(dmax)) / 2.0
    with open(out, "wb") as f:
        f.write(b"Pf\\n")
        f.write(("%d %d\\n" % (w, h)).encode())
        f.write(b"-1.0\\n")
        row = struct.pack("<%df" % w, *([value] * w))
        for _ in range(h):
            f.write(row)
    return 0


if __name__ == "__main__":
    sys.exit(main())
'''


def write_echo_matcher(directory):
    """Write the standalone constant-disparity adapter; returns its path."""
    from pathlib import Path

    path = Path(directory) / "echo_matcher.py"
    path.write_text(ECHO_MATCHER_SRC)
    return path
