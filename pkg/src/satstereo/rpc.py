"""Rational polynomial coefficient (RPC) camera models.

Implements the standard 20-term cubic RPC forward model (ground -> image),
its Newton inversion at fixed altitude (image -> ground), and a reader/writer
for the key-value text format (``LINE_OFF: ... pixels``,
``LINE_NUM_COEFF_1: ...``, RPC00B term ordering).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DenominatorNearZero,
    FormatError,
    NoConvergence,
    OutOfValidityBox,
)

# Accept points up to twice the normalized validity range of the model.
VALIDITY_FACTOR = 2.0
# Localization accepts altitudes within this many scales of the offset.
ALT_VALIDITY_FACTOR = 3.0
# |denominator| below this is treated as a pole of the rational model.
DEN_EPS = 1e-10
# Localization convergence tolerance, pixels. Kept an order of magnitude
# below the 1e-6 px round-trip guarantee: denormalizing to degrees and back
# costs up to ~1e-8 px at extreme longitudes, which must not eat the margin.
LOCALIZE_TOL_PX = 1e-7
LOCALIZE_MAX_ITER = 100


def _poly20(coeffs: np.ndarray, lon_n, lat_n, alt_n):
    """Evaluate a 20-term RPC cubic in normalized coordinates.

    Term ordering is the RPC00B convention with L = normalized longitude,
    P = normalized latitude, H = normalized altitude:
    1, L, P, H, LP, LH, PH, L2, P2, H2, PLH, L3, LP2, LH2, L2P, P3, PH2,
    L2H, P2H, H3.
    """
    L, P, H = lon_n, lat_n, alt_n
    c = coeffs
    return (
        c[0]
        + c[1] * L
        + c[2] * P
        + c[3] * H
        + c[4] * L * P
        + c[5] * L * H
        + c[6] * P * H
        + c[7] * L * L
        + c[8] * P * P
        + c[9] * H * H
        + c[10] * P * L * H
        + c[11] * L * L * L
        + c[12] * L * P * P
        + c[13] * L * H * H
        + c[14] * L * L * P
        + c[15] * P * P * P
        + c[16] * P * H * H
        + c[17] * L * L * H
        + c[18] * P * P * H
        + c[19] * H * H * H
    )


def _poly20_dL(c: np.ndarray, L, P, H):
    """Partial derivative of _poly20 with respect to normalized longitude."""
    return (
        c[1]
        + c[4] * P
        + c[5] * H
        + 2.0 * c[7] * L
        + c[10] * P * H
        + 3.0 * c[11] * L * L
        + c[12] * P * P
        + c[13] * H * H
        + 2.0 * c[14] * L * P
        + 2.0 * c[17] * L * H
    )


def _poly20_dP(c: np.ndarray, L, P, H):
    """Partial derivative of _poly20 with respect to normalized latitude."""
    return (
        c[2]
        + c[4] * L
        + c[6] * H
        + c[10] * L * H
        + 2.0 * c[12] * L * P
        + 3.0 * c[15] * P * P
        + c[16] * H * H
        + 2.0 * c[18] * P * H
    )


def monomials(lon_n, lat_n, alt_n) -> np.ndarray:
    """Stack the 20 RPC00B monomials along the first axis (for fitting)."""
    L, P, H = np.broadcast_arrays(
        np.asarray(lon_n, dtype=np.float64),
        np.asarray(lat_n, dtype=np.float64),
        np.asarray(alt_n, dtype=np.float64),
    )
    one = np.ones_like(L)
    return np.stack(
        [
            one, L, P, H,
            L * P, L * H, P * H,
            L * L, P * P, H * H,
            P * L * H,
            L * L * L, L * P * P, L * H * H,
            L * L * P, P * P * P, P * H * H,
            L * L * H, P * P * H, H * H * H,
        ]
    )


def _coeff_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (20,):
        raise FormatError(f"{name} must have exactly 20 coefficients, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{name} contains non-finite coefficients")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class RpcModel:
    """Immutable RPC camera model.

    Coefficient arrays follow the RPC00B term ordering (see _poly20).
    Denominators are normalized at construction so their constant term is
    exactly 1; models whose denominator constant term is within 1e-8 of zero
    are rejected.
    """

    line_off: float
    samp_off: float
    lat_off: float
    lon_off: float
    alt_off: float
    line_scale: float
    samp_scale: float
    lat_scale: float
    lon_scale: float
    alt_scale: float
    line_num: np.ndarray
    line_den: np.ndarray
    samp_num: np.ndarray
    samp_den: np.ndarray

    def __post_init__(self):
        for name in ("line_scale", "samp_scale", "lat_scale", "lon_scale", "alt_scale"):
            value = float(getattr(self, name))
            if not (np.isfinite(value) and value > 0.0):
                raise FormatError(f"{name} must be strictly positive, got {value!r}")
            object.__setattr__(self, name, value)
        for name in ("line_off", "samp_off", "lat_off", "lon_off", "alt_off"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise FormatError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        for num_name, den_name in (("line_num", "line_den"), ("samp_num", "samp_den")):
            num = _coeff_array(getattr(self, num_name), num_name)
            den = _coeff_array(getattr(self, den_name), den_name)
            if abs(den[0]) <= 1e-8:
                raise FormatError(
                    f"{den_name} constant term {den[0]!r} is too close to zero"
                )
            if den[0] != 1.0:
                num = _coeff_array(num / den[0], num_name)
                den = _coeff_array(den / den[0], den_name)
            object.__setattr__(self, num_name, num)
            object.__setattr__(self, den_name, den)

    # ------------------------------------------------------------------
    # Forward model
    # ------------------------------------------------------------------

    def _eval_normalized(self, lon_n, lat_n, alt_n):
        """Rational model in normalized coordinates -> (col_n, row_n)."""
        samp_den = _poly20(self.samp_den, lon_n, lat_n, alt_n)
        line_den = _poly20(self.line_den, lon_n, lat_n, alt_n)
        if np.any(np.abs(samp_den) < DEN_EPS) or np.any(np.abs(line_den) < DEN_EPS):
            raise DenominatorNearZero(
                "RPC denominator vanishes at the evaluated point"
            )
        col_n = _poly20(self.samp_num, lon_n, lat_n, alt_n) / samp_den
        row_n = _poly20(self.line_num, lon_n, lat_n, alt_n) / line_den
        return col_n, row_n

    def project(self, lon, lat, alt):
        """Project ground coordinates to image pixel coordinates.

        Args:
            lon, lat: geodetic coordinates, degrees (scalar or array).
            alt: height above the ellipsoid, meters (scalar or array).

        Returns:
            (col, row) pixel coordinates, same shape as the broadcast inputs.

        Raises:
            OutOfValidityBox: any normalized coordinate exceeds 2 in absolute
                value (twice the model's stated validity range).
            DenominatorNearZero: a denominator polynomial vanishes.
        """
        scalar = np.isscalar(lon) and np.isscalar(lat) and np.isscalar(alt)
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        alt = np.asarray(alt, dtype=np.float64)
        lon_n = (lon - self.lon_off) / self.lon_scale
        lat_n = (lat - self.lat_off) / self.lat_scale
        alt_n = (alt - self.alt_off) / self.alt_scale
        bound = VALIDITY_FACTOR
        for axis, value in (("lon", lon_n), ("lat", lat_n), ("alt", alt_n)):
            if np.any(np.abs(value) > bound):
                worst = float(np.max(np.abs(value)))
                raise OutOfValidityBox(
                    f"normalized {axis} reaches {worst:.3f}, "
                    f"outside the +/-{bound:g} validity box"
                )
        col_n, row_n = self._eval_normalized(lon_n, lat_n, alt_n)
        col = col_n * self.samp_scale + self.samp_off
        row = row_n * self.line_scale + self.line_off
        if scalar:
            return float(col), float(row)
        return col, row

    def try_project(self, lon, lat, alt):
        """Vectorized projection that masks invalid points instead of raising.

        Returns:
            (col, row, valid): col/row are NaN where valid is False (point
            outside the validity box or on a denominator pole).
        """
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        alt = np.asarray(alt, dtype=np.float64)
        lon_n = (lon - self.lon_off) / self.lon_scale
        lat_n = (lat - self.lat_off) / self.lat_scale
        alt_n = (alt - self.alt_off) / self.alt_scale
        lon_n, lat_n, alt_n = np.broadcast_arrays(lon_n, lat_n, alt_n)
        valid = (
            (np.abs(lon_n) <= VALIDITY_FACTOR)
            & (np.abs(lat_n) <= VALIDITY_FACTOR)
            & (np.abs(alt_n) <= VALIDITY_FACTOR)
        )
        with np.errstate(all="ignore"):
            sd = _poly20(self.samp_den, lon_n, lat_n, alt_n)
            ld = _poly20(self.line_den, lon_n, lat_n, alt_n)
            valid = valid & (np.abs(sd) >= DEN_EPS) & (np.abs(ld) >= DEN_EPS)
            col = _poly20(self.samp_num, lon_n, lat_n, alt_n) / sd
            row = _poly20(self.line_num, lon_n, lat_n, alt_n) / ld
            col = col * self.samp_scale + self.samp_off
            row = row * self.line_scale + self.line_off
        valid = valid & np.isfinite(col) & np.isfinite(row)
        col = np.where(valid, col, np.nan)
        row = np.where(valid, row, np.nan)
        return col, row, valid

    # ------------------------------------------------------------------
    # Inverse model at fixed altitude
    # ------------------------------------------------------------------

    def _jacobian_normalized(self, lon_n, lat_n, alt_n):
        """d(col_n, row_n)/d(lon_n, lat_n) of the rational model."""
        out = []
        for num, den in ((self.samp_num, self.samp_den), (self.line_num, self.line_den)):
            n = _poly20(num, lon_n, lat_n, alt_n)
            d = _poly20(den, lon_n, lat_n, alt_n)
            d2 = d * d
            fL = (_poly20_dL(num, lon_n, lat_n, alt_n) * d
                  - n * _poly20_dL(den, lon_n, lat_n, alt_n)) / d2
            fP = (_poly20_dP(num, lon_n, lat_n, alt_n) * d
                  - n * _poly20_dP(den, lon_n, lat_n, alt_n)) / d2
            out.append((fL, fP))
        (cL, cP), (rL, rP) = out
        return cL, cP, rL, rP

    def localize(self, col, row, alt, tol_px: float = LOCALIZE_TOL_PX,
                 max_iter: int = LOCALIZE_MAX_ITER,
                 mask_failures: bool = False):
        """Invert the RPC at fixed altitude: pixel -> (lon, lat).

        Damped Newton iteration on the 2D normalized residual, initialized
        from the linear part of the numerator polynomials. The result
        reprojects to within ``tol_px`` pixels of the requested pixel.

        Args:
            col, row: pixel coordinates (scalar or array).
            alt: altitude, meters (scalar or array, broadcast with pixels).
            tol_px: convergence tolerance on the reprojection residual.
            max_iter: Newton iteration budget.
            mask_failures: when True, points that fail to converge yield
                NaN coordinates instead of raising NoConvergence.

        Returns:
            (lon, lat) in degrees, same shape as the broadcast inputs.

        Raises:
            OutOfValidityBox: altitude outside alt_off +/- 3 * alt_scale.
            NoConvergence: residual above tol_px after max_iter iterations
                (suppressed per-point by ``mask_failures``).
            DenominatorNearZero: a denominator polynomial vanishes.
        """
        scalar = np.isscalar(col) and np.isscalar(row) and np.isscalar(alt)
        col, row, alt = np.broadcast_arrays(
            np.asarray(col, dtype=np.float64),
            np.asarray(row, dtype=np.float64),
            np.asarray(alt, dtype=np.float64),
        )
        alt_n = (alt - self.alt_off) / self.alt_scale
        if np.any(np.abs(alt_n) > ALT_VALIDITY_FACTOR):
            worst = float(np.max(np.abs(alt_n)))
            raise OutOfValidityBox(
                f"normalized altitude reaches {worst:.3f}, outside the "
                f"+/-{ALT_VALIDITY_FACTOR:g} localization range"
            )
        target_c = (col - self.samp_off) / self.samp_scale
        target_r = (row - self.line_off) / self.line_scale

        # Initializer: solve the linear part of the numerators (den ~ 1).
        sn, ln = self.samp_num, self.line_num
        det0 = sn[1] * ln[2] - sn[2] * ln[1]
        if abs(det0) > 1e-12:
            bc = target_c - sn[0] - sn[3] * alt_n
            br = target_r - ln[0] - ln[3] * alt_n
            L = (ln[2] * bc - sn[2] * br) / det0
            P = (-ln[1] * bc + sn[1] * br) / det0
        else:
            L = np.zeros_like(target_c)
            P = np.zeros_like(target_r)
        L = np.array(L, dtype=np.float64)
        P = np.array(P, dtype=np.float64)

        def residual(Lv, Pv):
            # Poles become infinite residuals so the damping backs off
            # instead of aborting the whole batch on a transient step.
            with np.errstate(all="ignore"):
                return _residual_impl(Lv, Pv)

        def _residual_impl(Lv, Pv):
            sd = _poly20(self.samp_den, Lv, Pv, alt_n)
            ld = _poly20(self.line_den, Lv, Pv, alt_n)
            bad = (np.abs(sd) < DEN_EPS) | (np.abs(ld) < DEN_EPS)
            sd = np.where(bad, 1.0, sd)
            ld = np.where(bad, 1.0, ld)
            rc = (_poly20(self.samp_num, Lv, Pv, alt_n) / sd - target_c) * self.samp_scale
            rr = (_poly20(self.line_num, Lv, Pv, alt_n) / ld - target_r) * self.line_scale
            rc = np.where(bad, np.inf, rc)
            rr = np.where(bad, np.inf, rr)
            return rc, rr

        rc, rr = residual(L, P)
        err = np.maximum(np.abs(rc), np.abs(rr))
        for _ in range(max_iter):
            active = err >= tol_px
            if not np.any(active):
                break
            with np.errstate(all="ignore"):
                cL, cP, rL, rP = self._jacobian_normalized(L, P, alt_n)
                # Jacobian of the pixel-space residual wrt (L, P).
                j00 = cL * self.samp_scale
                j01 = cP * self.samp_scale
                j10 = rL * self.line_scale
                j11 = rP * self.line_scale
                det = j00 * j11 - j01 * j10
                safe = np.isfinite(det) & (np.abs(det) > 1e-14)
                det = np.where(safe, det, 1.0)
                dL = np.where(safe, -(j11 * rc - j01 * rr) / det, 0.0)
                dP = np.where(safe, -(-j10 * rc + j00 * rr) / det, 0.0)
            dL = np.where(active & np.isfinite(dL), dL, 0.0)
            dP = np.where(active & np.isfinite(dP), dP, 0.0)
            # Damping: halve the step until the residual does not increase.
            lam = np.ones_like(L)
            best_L, best_P = L + dL, P + dP
            new_rc, new_rr = residual(best_L, best_P)
            new_err = np.maximum(np.abs(new_rc), np.abs(new_rr))
            for _ in range(12):
                worse = active & (new_err > err)
                if not np.any(worse):
                    break
                lam = np.where(worse, lam * 0.5, lam)
                trial_L = L + lam * dL
                trial_P = P + lam * dP
                t_rc, t_rr = residual(trial_L, trial_P)
                t_err = np.maximum(np.abs(t_rc), np.abs(t_rr))
                take = worse & (t_err <= new_err)
                best_L = np.where(take, trial_L, best_L)
                best_P = np.where(take, trial_P, best_P)
                new_rc = np.where(take, t_rc, new_rc)
                new_rr = np.where(take, t_rr, new_rr)
                new_err = np.where(take, t_err, new_err)
            L = np.where(active, best_L, L)
            P = np.where(active, best_P, P)
            rc = np.where(active, new_rc, rc)
            rr = np.where(active, new_rr, rr)
            err = np.where(active, new_err, err)
        bad = ~(err < tol_px)
        if np.any(bad):
            if not mask_failures:
                worst = float(np.max(err))
                n_bad = int(np.count_nonzero(bad))
                raise NoConvergence(
                    f"localization failed for {n_bad} point(s); "
                    f"worst residual {worst:.3e} px after {max_iter} iterations"
                )
            L = np.where(bad, np.nan, L)
            P = np.where(bad, np.nan, P)
        lon = L * self.lon_scale + self.lon_off
        lat = P * self.lat_scale + self.lat_off
        if scalar:
            return float(lon), float(lat)
        return lon, lat


# ----------------------------------------------------------------------
# Text format (RPC00B-style key/value lines)
# ----------------------------------------------------------------------

_SCALARS = {
    "LINE_OFF": ("line_off", "pixels"),
    "SAMP_OFF": ("samp_off", "pixels"),
    "LAT_OFF": ("lat_off", "degrees"),
    "LONG_OFF": ("lon_off", "degrees"),
    "HEIGHT_OFF": ("alt_off", "meters"),
    "LINE_SCALE": ("line_scale", "pixels"),
    "SAMP_SCALE": ("samp_scale", "pixels"),
    "LAT_SCALE": ("lat_scale", "degrees"),
    "LONG_SCALE": ("lon_scale", "degrees"),
    "HEIGHT_SCALE": ("alt_scale", "meters"),
}

_COEFF_PREFIXES = {
    "LINE_NUM_COEFF": "line_num",
    "LINE_DEN_COEFF": "line_den",
    "SAMP_NUM_COEFF": "samp_num",
    "SAMP_DEN_COEFF": "samp_den",
}


def parse_rpc_text(text: str) -> RpcModel:
    """Parse an RPC00B-style key/value text block into an RpcModel.

    Keys are case-insensitive; trailing unit words (pixels/degrees/meters)
    and surrounding whitespace are ignored.
    """
    values: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise FormatError(f"line {lineno}: expected 'KEY: value', got {raw!r}")
        key, _, rest = line.partition(":")
        key = key.strip().upper()
        tokens = rest.split()
        if not tokens:
            raise FormatError(f"line {lineno}: no value for key {key!r}")
        try:
            value = float(tokens[0])
        except ValueError as exc:
            raise FormatError(
                f"line {lineno}: cannot parse value {tokens[0]!r} for key {key!r}"
            ) from exc
        values[key] = value

    kwargs: dict[str, object] = {}
    missing: list[str] = []
    for key, (attr, _unit) in _SCALARS.items():
        if key in values:
            kwargs[attr] = values[key]
        else:
            missing.append(key)
    for prefix, attr in _COEFF_PREFIXES.items():
        coeffs = np.zeros(20, dtype=np.float64)
        for i in range(20):
            key = f"{prefix}_{i + 1}"
            if key not in values:
                missing.append(key)
                continue
            coeffs[i] = values[key]
        kwargs[attr] = coeffs
    if missing:
        raise FormatError(
            "RPC text is missing required keys: " + ", ".join(sorted(missing)[:8])
            + ("..." if len(missing) > 8 else "")
        )
    return RpcModel(**kwargs)


def format_rpc_text(model: RpcModel) -> str:
    """Serialize an RpcModel to RPC00B-style key/value text."""
    lines = []
    for key, (attr, unit) in _SCALARS.items():
        lines.append(f"{key}: {getattr(model, attr):.12f} {unit}")
    for prefix, attr in _COEFF_PREFIXES.items():
        coeffs = getattr(model, attr)
        for i in range(20):
            lines.append(f"{prefix}_{i + 1}: {coeffs[i]:.12e}")
    return "\n".join(lines) + "\n"


def load_rpc(path) -> RpcModel:
    """Read an RpcModel from an RPC00B-style text file."""
    return parse_rpc_text(Path(path).read_text())


def save_rpc(path, model: RpcModel) -> None:
    """Write an RpcModel to an RPC00B-style text file."""
    Path(path).write_text(format_rpc_text(model))
