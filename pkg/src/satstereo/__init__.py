"""satstereo: satellite stereo reconstruction (rectify, match, DSM, eval).

The package turns two satellite images with RPC camera models into a
geo-referenced Digital Surface Model and an evaluation report:

    from satstereo import load_config, run_pipeline
    result = run_pipeline(load_config("scene/config.json"))
    print(result.dsm_path, result.report)

Each stage is also importable on its own (see the module docstrings), and
the ``satstereo`` console script exposes the same stages as subcommands.
"""

# Assigned before the submodule imports: satstereo.pipeline reads it back
# from the package to stamp run manifests.
__version__ = "0.1.0"

from .adapter import run_external_matcher
from .config import (
    ExternalMatcherSpec,
    NativeMatcherSpec,
    PipelineConfig,
    example_config_dict,
    load_config,
)
from .dsm import (
    DsmGrid,
    PointCloud,
    disparity_to_points,
    load_dsm,
    mosaic,
    rasterize,
    save_dsm,
)
from .errors import (
    AdapterFailed,
    ConfigError,
    FormatError,
    SatStereoError,
    StageError,
)
from .evaluation import (
    ClassMap,
    ErrorField,
    Metrics,
    MetricsReport,
    classwise_metrics,
    compute_metrics,
    planimetric_align,
    resample_to_gt,
    valid_fraction,
    vertical_align,
)
from .matching import (
    CANONICAL_CONVENTION,
    DisparityMap,
    SignConvention,
    lr_consistency_filter,
    normalize_sign,
    run_native_matcher,
)
from .pfm import read_pfm, write_pfm
from .pipeline import (
    PairClass,
    PairMetadata,
    PipelineResult,
    classify_pair,
    estimate_pair_geometry,
    evaluate_dsm,
    run_pipeline,
    tile_roi,
)
from .rectification import (
    RectifyingPair,
    Roi,
    build_rectification,
    rectify_image,
)
from .report import write_report
from .rpc import (
    RpcModel,
    format_rpc_text,
    load_rpc,
    parse_rpc_text,
    save_rpc,
)
from .geometry import triangulate

__all__ = [
    "AdapterFailed",
    "CANONICAL_CONVENTION",
    "ClassMap",
    "ConfigError",
    "DisparityMap",
    "DsmGrid",
    "ErrorField",
    "ExternalMatcherSpec",
    "FormatError",
    "Metrics",
    "MetricsReport",
    "NativeMatcherSpec",
    "PairClass",
    "PairMetadata",
    "PipelineConfig",
    "PipelineResult",
    "PointCloud",
    "RectifyingPair",
    "Roi",
    "RpcModel",
    "SatStereoError",
    "SignConvention",
    "StageError",
    "build_rectification",
    "classify_pair",
    "classwise_metrics",
    "compute_metrics",
    "disparity_to_points",
    "estimate_pair_geometry",
    "evaluate_dsm",
    "example_config_dict",
    "format_rpc_text",
    "load_config",
    "load_dsm",
    "load_rpc",
    "lr_consistency_filter",
    "mosaic",
    "normalize_sign",
    "parse_rpc_text",
    "planimetric_align",
    "rasterize",
    "read_pfm",
    "rectify_image",
    "resample_to_gt",
    "run_external_matcher",
    "run_native_matcher",
    "run_pipeline",
    "save_dsm",
    "save_rpc",
    "tile_roi",
    "triangulate",
    "valid_fraction",
    "vertical_align",
    "write_pfm",
    "write_report",
    "__version__",
]
