"""Pipeline configuration: a JSON file with a documented schema.

Every default is overridable; unknown keys are rejected so typos fail
fast. See PipelineConfig for the field meanings and defaults and
``example_config_dict`` for a complete template.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .matching import (
    ExternalMatcherSpec,
    NativeMatcherSpec,
    SignConvention,
)
from .rectification import DEFAULT_MARGIN_PX, Roi

DEFAULT_LR_THRESHOLD_PX = 2.0
DEFAULT_TILE_PX = 1024
DEFAULT_OVERLAP_PX = 128
DEFAULT_CELL_M = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    """Full configuration of one pipeline run.

    Paths are resolved relative to the config file's directory when loaded
    from disk. ``matcher`` is either a NativeMatcherSpec or an
    ExternalMatcherSpec. ``class_names`` maps semantic class ids to display
    names and ``aggregates`` maps an aggregate scope name to the class ids
    it excludes.
    """

    image1: Path
    image2: Path
    rpc1: Path
    rpc2: Path
    roi: Roi
    output_dir: Path
    matcher: NativeMatcherSpec | ExternalMatcherSpec = NativeMatcherSpec()
    margin_px: float = DEFAULT_MARGIN_PX
    lr_threshold_px: float = DEFAULT_LR_THRESHOLD_PX
    polarity_hint: int | None = None
    tile_px: int = DEFAULT_TILE_PX
    overlap_px: int = DEFAULT_OVERLAP_PX
    cell_m: float = DEFAULT_CELL_M
    gt_dsm: Path | None = None
    class_map: Path | None = None
    class_names: dict = field(default_factory=dict)
    aggregates: dict = field(default_factory=dict)
    scene: str = "scene"
    workers: int | None = None
    skip_failed_tiles: bool = False
    save_intermediates: bool = False
    planimetric_align: bool = False

    def __post_init__(self) -> None:
        if self.tile_px < 1:
            raise ConfigError(f"tile_px must be >= 1, got {self.tile_px}")
        if not 0 <= self.overlap_px < self.tile_px:
            raise ConfigError(
                f"overlap_px must satisfy 0 <= overlap < tile size, got "
                f"overlap {self.overlap_px} and tile {self.tile_px}")
        if self.margin_px < 0:
            raise ConfigError(f"margin_px must be >= 0, got {self.margin_px}")
        if self.lr_threshold_px <= 0:
            raise ConfigError(
                f"lr_threshold_px must be > 0, got {self.lr_threshold_px}")
        if self.cell_m <= 0:
            raise ConfigError(f"cell_m must be > 0, got {self.cell_m}")
        if self.polarity_hint not in (None, 1, -1):
            raise ConfigError(
                f"polarity_hint must be null, 1 or -1, got {self.polarity_hint}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        for key in self.class_names:
            if not isinstance(key, int):
                raise ConfigError(
                    f"class_names keys must be integers, got {key!r}")

    def manifest_dict(self) -> dict:
        """Every config field, JSON-serializable, for the run manifest."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = _to_jsonable(value)
        return out


def _to_jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, Roi):
        return {k: getattr(value, k) for k in
                ("lon_min", "lon_max", "lat_min", "lat_max",
                 "alt_lo", "alt_hi")}
    if isinstance(value, NativeMatcherSpec):
        return {"kind": "native", "census_window": value.census_window,
                "p1": value.p1, "p2": value.p2, "paths": value.paths,
                "uniqueness_ratio": value.uniqueness_ratio}
    if isinstance(value, ExternalMatcherSpec):
        return {"kind": "external", "command": list(value.command),
                "convention": value.convention.value,
                "timeout": value.timeout}
    if isinstance(value, SignConvention):
        return value.value
    if isinstance(value, dict):
        return {str(k): _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        return [_to_jsonable(v) for v in value]
    return value


_ROI_KEYS = ("lon_min", "lon_max", "lat_min", "lat_max", "alt_lo", "alt_hi")
_REQUIRED_KEYS = ("image1", "image2", "rpc1", "rpc2", "roi", "output_dir")
_OPTIONAL_KEYS = ("matcher", "margin_px", "lr_threshold_px", "polarity_hint",
                  "tile_px", "overlap_px", "cell_m", "gt_dsm", "class_map",
                  "class_names", "aggregates", "scene", "workers",
                  "skip_failed_tiles", "save_intermediates",
                  "planimetric_align")


def _parse_matcher(entry):
    if not isinstance(entry, dict):
        raise ConfigError(f"matcher must be an object, got {type(entry).__name__}")
    entry = dict(entry)
    kind = entry.pop("kind", "native")
    if kind == "native":
        allowed = {"census_window", "p1", "p2", "paths", "uniqueness_ratio"}
        unknown = set(entry) - allowed
        if unknown:
            raise ConfigError(
                f"unknown native matcher keys: {sorted(unknown)}")
        return NativeMatcherSpec(**entry)
    if kind == "external":
        allowed = {"command", "convention", "timeout"}
        unknown = set(entry) - allowed
        if unknown:
            raise ConfigError(
                f"unknown external matcher keys: {sorted(unknown)}")
        if "command" not in entry:
            raise ConfigError("external matcher requires a command")
        if "convention" in entry:
            try:
                entry["convention"] = SignConvention(entry["convention"])
            except ValueError as exc:
                raise ConfigError(
                    f"unknown sign convention {entry['convention']!r}; use "
                    f"{[c.value for c in SignConvention]}") from exc
        return ExternalMatcherSpec(**entry)
    raise ConfigError(f"matcher kind must be 'native' or 'external', got {kind!r}")


def config_from_dict(data: dict, base_dir=None) -> PipelineConfig:
    """Build a validated PipelineConfig from a parsed JSON object.

    Raises:
        ConfigError: missing/unknown keys or invalid values.
    """
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    base = Path(base_dir) if base_dir is not None else Path(".")
    unknown = set(data) - set(_REQUIRED_KEYS) - set(_OPTIONAL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = [k for k in _REQUIRED_KEYS if k not in data]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")

    roi_raw = data["roi"]
    if not isinstance(roi_raw, dict):
        raise ConfigError("roi must be an object with "
                          + ", ".join(_ROI_KEYS))
    bad = set(roi_raw) ^ set(_ROI_KEYS)
    if bad:
        raise ConfigError(f"roi must have exactly the keys {_ROI_KEYS}")
    try:
        roi = Roi(**{k: float(roi_raw[k]) for k in _ROI_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad roi values: {exc}") from exc

    def path_of(key, optional=False):
        value = data.get(key)
        if value is None:
            if optional:
                return None
            raise ConfigError(f"config key {key!r} must be a path")
        return base / str(value)

    kwargs = {
        "image1": path_of("image1"),
        "image2": path_of("image2"),
        "rpc1": path_of("rpc1"),
        "rpc2": path_of("rpc2"),
        "roi": roi,
        "output_dir": path_of("output_dir"),
        "gt_dsm": path_of("gt_dsm", optional=True),
        "class_map": path_of("class_map", optional=True),
    }
    if "matcher" in data:
        kwargs["matcher"] = _parse_matcher(data["matcher"])
    for key in ("margin_px", "lr_threshold_px", "cell_m"):
        if key in data:
            kwargs[key] = float(data[key])
    for key in ("tile_px", "overlap_px"):
        if key in data:
            kwargs[key] = int(data[key])
    if "polarity_hint" in data and data["polarity_hint"] is not None:
        kwargs["polarity_hint"] = int(data["polarity_hint"])
    elif "polarity_hint" in data:
        kwargs["polarity_hint"] = None
    if "workers" in data and data["workers"] is not None:
        kwargs["workers"] = int(data["workers"])
    for key in ("skip_failed_tiles", "save_intermediates",
                "planimetric_align"):
        if key in data:
            if not isinstance(data[key], bool):
                raise ConfigError(f"config key {key!r} must be true or false")
            kwargs[key] = data[key]
    if "scene" in data:
        kwargs["scene"] = str(data["scene"])
    if "class_names" in data:
        try:
            kwargs["class_names"] = {int(k): str(v)
                                     for k, v in data["class_names"].items()}
        except (AttributeError, ValueError) as exc:
            raise ConfigError(
                f"class_names must map integer ids to names: {exc}") from exc
    if "aggregates" in data:
        try:
            kwargs["aggregates"] = {
                str(name): frozenset(int(v) for v in ids)
                for name, ids in data["aggregates"].items()}
        except (AttributeError, TypeError, ValueError) as exc:
            raise ConfigError(
                f"aggregates must map names to lists of class ids: "
                f"{exc}") from exc
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    """Load and validate a JSON config file; paths resolve relative to it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return config_from_dict(data, base_dir=path.parent)


def example_config_dict() -> dict:
    """A complete config template with every key at its default."""
    return {
        "image1": "left.pfm",
        "image2": "right.pfm",
        "rpc1": "left.rpc",
        "rpc2": "right.rpc",
        "roi": {k: 0.0 for k in _ROI_KEYS} | {
            "lon_max": 0.01, "lat_max": 0.01, "alt_hi": 100.0},
        "output_dir": "out",
        "matcher": {"kind": "native", "census_window": 5, "p1": 8.0,
                    "p2": 96.0, "paths": 8, "uniqueness_ratio": 0.95},
        "margin_px": DEFAULT_MARGIN_PX,
        "lr_threshold_px": DEFAULT_LR_THRESHOLD_PX,
        "polarity_hint": None,
        "tile_px": DEFAULT_TILE_PX,
        "overlap_px": DEFAULT_OVERLAP_PX,
        "cell_m": DEFAULT_CELL_M,
        "gt_dsm": None,
        "class_map": None,
        "class_names": {},
        "aggregates": {},
        "scene": "scene",
        "workers": None,
        "skip_failed_tiles": False,
        "save_intermediates": False,
        "planimetric_align": False,
    }
