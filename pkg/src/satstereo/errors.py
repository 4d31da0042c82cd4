"""Exception hierarchy for the satstereo pipeline.

Every error raised by the library derives from SatStereoError so callers can
catch pipeline failures with a single except clause. The CLI maps subtrees of
this hierarchy to exit codes (config errors, stage failures, adapter failures).
"""


class SatStereoError(Exception):
    """Base class for all satstereo errors."""


class ConfigError(SatStereoError):
    """Invalid or incomplete pipeline configuration."""


class FormatError(SatStereoError):
    """Malformed input file (RPC text, PFM, sidecar, GeoTIFF subset)."""


# --- geometry ---------------------------------------------------------------

class DenominatorNearZero(SatStereoError):
    """RPC denominator polynomial evaluates too close to zero."""


class OutOfValidityBox(SatStereoError):
    """Point falls outside the RPC model's normalized validity domain."""


class NoConvergence(SatStereoError):
    """Iterative solver failed to reach the requested tolerance."""


class DegenerateRays(SatStereoError):
    """Triangulated rays are (near) parallel; altitude is unobservable."""


class PointAtInfinity(SatStereoError):
    """Projective division by a vanishing homogeneous coordinate."""


class OutOfUtmRange(SatStereoError):
    """Latitude outside the UTM system's defined band."""


# --- rectification ----------------------------------------------------------

class InsufficientCorrespondences(SatStereoError):
    """Too few valid virtual correspondences to fit rectifying transforms."""


class DegenerateGeometry(SatStereoError):
    """Rank-deficient correspondence geometry; epipolar fit undefined."""


class ResidualTooLarge(SatStereoError):
    """Affine rectification residual exceeds tolerance for this ROI."""


class InsufficientMatches(SatStereoError):
    """Sparse matcher produced fewer matches than required."""


class AltitudeInconsistent(SatStereoError):
    """Neither disparity polarity makes disparity grow with altitude."""


# --- matching ---------------------------------------------------------------

class WindowTooLarge(SatStereoError):
    """Census window exceeds the 64-bit descriptor capacity."""


class RangeTooWide(SatStereoError):
    """Disparity range exceeds the cost-volume budget."""


class AdapterFailed(SatStereoError):
    """External matcher process failed (exit code, timeout, bad output)."""

    def __init__(self, message, stderr=None):
        super().__init__(message)
        self.stderr = stderr


class SizeMismatch(SatStereoError):
    """Rasters that must share dimensions do not."""


# --- dsm / eval -------------------------------------------------------------

class GridMismatch(SatStereoError):
    """DSM grids differ in cell size, CRS or lattice alignment."""


class NoOverlap(SatStereoError):
    """Rasters share no common extent."""


class InsufficientOverlap(SatStereoError):
    """Too few jointly valid cells for vertical alignment."""


class EmptyField(SatStereoError):
    """Error field contains no valid cells."""


class EmptyGt(SatStereoError):
    """Ground-truth raster has no valid cells."""


class MissingMetadata(SatStereoError):
    """Pair metadata lacks fields required for classification."""


# --- pipeline ---------------------------------------------------------------

class StageError(SatStereoError):
    """Pipeline stage failure, tagged with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
