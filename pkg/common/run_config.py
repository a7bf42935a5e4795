"""
Structured run configuration
Defaults come from common.config; a YAML or TOML file and command-line
overrides are layered on top, type-checked field by field.
"""

import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from common.config import (
    BASELINE_CONFIG, DATASET_CONFIG, EVALUATION_CONFIG, IMAGE_CONFIG, INFERENCE_CONFIG,
    MODEL_CONFIG, PATHS, TRAIN_CONFIG, TRANSFORM_CONFIG
)
from common.errors import ConfigError
from common.network import ModelConfig
from common.utils import atomic_write_text, sanitize_filename

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)


@dataclass
class DataConfig:
    images_dir: str = PATHS["images_directory"]
    pairs_dir: str = PATHS["pairs_directory"]
    checkpoint: Optional[str] = None
    pair_family: str = "all"
    pair_count: int = 20
    dataset_size: int = DATASET_CONFIG["count"]
    image_size: int = DATASET_CONFIG["image_size"]

    def validate(self):
        for name in ("pair_count", "dataset_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"data.{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size < IMAGE_CONFIG["min_size_px"]:
            raise ValueError(f"data.image_size must be >= {IMAGE_CONFIG['min_size_px']}, got {self.image_size}")


@dataclass
class ImageConfig:
    target_spacing_mm: float = IMAGE_CONFIG["target_spacing_mm"]
    background_value: float = IMAGE_CONFIG["background_value"]

    def validate(self):
        if not self.target_spacing_mm > 0:
            raise ValueError(f"image.target_spacing_mm must be positive, got {self.target_spacing_mm}")


@dataclass
class MaskConfig:
    threshold_fraction: float = IMAGE_CONFIG["mask_threshold_fraction"]
    min_component_px: int = IMAGE_CONFIG["min_component_px"]

    def validate(self):
        if not 0 <= self.threshold_fraction <= 1:
            raise ValueError(f"mask.threshold_fraction must be in [0, 1], got {self.threshold_fraction}")
        if self.min_component_px < 0:
            raise ValueError(f"mask.min_component_px must be >= 0, got {self.min_component_px}")


@dataclass
class TransformConfig:
    intensity_range: List[float] = field(default_factory=lambda: list(TRANSFORM_CONFIG["intensity_range"]))
    intensity_cap: float = TRANSFORM_CONFIG["intensity_cap"]
    rotation_deg: List[float] = field(default_factory=lambda: list(TRANSFORM_CONFIG["rotation_deg"]))
    scale: List[float] = field(default_factory=lambda: list(TRANSFORM_CONFIG["scale"]))
    shear: List[float] = field(default_factory=lambda: list(TRANSFORM_CONFIG["shear"]))
    translation_fraction: List[float] = field(default_factory=lambda: list(TRANSFORM_CONFIG["translation_fraction"]))
    elastic_blobs: int = TRANSFORM_CONFIG["elastic_blobs"]
    elastic_sigma_fraction: List[float] = field(default_factory=lambda: list(TRANSFORM_CONFIG["elastic_sigma_fraction"]))
    elastic_amplitude_px: List[float] = field(default_factory=lambda: list(TRANSFORM_CONFIG["elastic_amplitude_px"]))
    evaluation_families: List[str] = field(default_factory=lambda: list(TRANSFORM_CONFIG["evaluation_families"]))

    def validate(self, families: List[str]):
        """Every named family must build a valid TransformSpec from these ranges"""
        from trainer.transforms import specs_from_config

        if not self.evaluation_families:
            raise ValueError("transforms.evaluation_families must not be empty")
        specs_from_config(self, list(dict.fromkeys(list(families) + self.evaluation_families)))


@dataclass
class ModelSection:
    encoder_filters: List[int] = field(default_factory=lambda: list(MODEL_CONFIG["encoder_filters"]))
    descriptor_blocks: List[int] = field(default_factory=lambda: list(MODEL_CONFIG["descriptor_blocks"]))
    head_input: str = MODEL_CONFIG["head_input"]

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(tuple(self.encoder_filters), tuple(self.descriptor_blocks), head_input=self.head_input)


@dataclass
class TrainConfig:
    epochs: int = TRAIN_CONFIG["epochs"]
    batch_size: int = TRAIN_CONFIG["batch_size"]
    learning_rate: float = TRAIN_CONFIG["learning_rate"]
    weight_decay: float = TRAIN_CONFIG["weight_decay"]
    K: int = TRAIN_CONFIG["K"]
    cell_px: int = TRAIN_CONFIG["cell_px"]
    thresh_pixels: float = TRAIN_CONFIG["thresh_pixels"]
    m_pos: float = TRAIN_CONFIG["m_pos"]
    m_neg: float = TRAIN_CONFIG["m_neg"]
    families: List[str] = field(default_factory=lambda: list(TRANSFORM_CONFIG["training_families"]))
    family_weights: Optional[List[float]] = None
    validation_fraction: float = TRAIN_CONFIG["validation_fraction"]
    prefetch_depth: int = TRAIN_CONFIG["prefetch_depth"]
    seed: int = TRAIN_CONFIG["seed"]

    def validate(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "K", "cell_px"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("learning_rate", "thresh_pixels", "m_neg"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.m_pos < 0:
            raise ValueError("weight_decay and m_pos must be >= 0")
        if self.m_neg <= self.m_pos:
            raise ValueError(f"m_neg ({self.m_neg}) must exceed m_pos ({self.m_pos})")
        if not self.families:
            raise ValueError("families must not be empty")
        if self.family_weights is not None:
            if len(self.family_weights) != len(self.families):
                raise ValueError("family_weights must have one entry per family")
            if any(w < 0 for w in self.family_weights) or sum(self.family_weights) <= 0:
                raise ValueError("family_weights must be non-negative with a positive sum")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class InferenceConfig:
    thresh_landmark: float = INFERENCE_CONFIG["thresh_landmark"]
    cell_px: int = INFERENCE_CONFIG["cell_px"]

    def validate(self):
        if not 0 <= self.thresh_landmark <= 1:
            raise ValueError(f"inference.thresh_landmark must be in [0, 1], got {self.thresh_landmark}")
        if self.cell_px < 1:
            raise ValueError(f"inference.cell_px must be >= 1, got {self.cell_px}")


@dataclass
class BaselineConfig:
    octaves: int = BASELINE_CONFIG["octaves"]
    scales_per_octave: int = BASELINE_CONFIG["scales_per_octave"]
    sigma: float = BASELINE_CONFIG["sigma"]
    contrast_thresh: float = BASELINE_CONFIG["contrast_thresh"]
    border_px: int = BASELINE_CONFIG["border_px"]
    ratio: float = BASELINE_CONFIG["ratio"]
    descriptor_clip: float = BASELINE_CONFIG["descriptor_clip"]

    def validate(self):
        for name in ("octaves", "scales_per_octave"):
            if getattr(self, name) < 1:
                raise ValueError(f"baseline.{name} must be >= 1, got {getattr(self, name)}")
        if self.sigma <= 0 or self.descriptor_clip <= 0:
            raise ValueError("baseline.sigma and baseline.descriptor_clip must be positive")
        if self.contrast_thresh < 0 or self.border_px < 0:
            raise ValueError("baseline.contrast_thresh and baseline.border_px must be >= 0")
        if not 0 < self.ratio < 1:
            raise ValueError(f"baseline.ratio must be in (0, 1), got {self.ratio}")


@dataclass
class EvaluationConfig:
    curve_thresholds_mm: List[float] = field(default_factory=lambda: list(EVALUATION_CONFIG["curve_thresholds_mm"]))
    within_mm: float = EVALUATION_CONFIG["within_mm"]
    gross_error_mm: float = EVALUATION_CONFIG["gross_error_mm"]


@dataclass
class RunConfig:
    name: str = "default"
    output_dir: str = PATHS["runs_directory"]
    jobs: int = 1
    import_keypoints: Optional[str] = None
    visualize: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    image: ImageConfig = field(default_factory=ImageConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    transforms: TransformConfig = field(default_factory=TransformConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @property
    def run_dir(self) -> str:
        return os.path.join(self.output_dir, sanitize_filename(self.name))

    def run_path(self, key: str, *parts: str) -> str:
        return os.path.join(self.run_dir, PATHS[key], *parts)

    def ensure_run_dirs(self):
        for key in ("checkpoints", "logs", "matches", "reports", "plots"):
            os.makedirs(os.path.join(self.run_dir, PATHS[key]), exist_ok=True)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def validate(self):
        families = list(self.train.families)
        if self.data.pair_family and self.data.pair_family != "all":
            families.append(self.data.pair_family)
        try:
            self.train.validate()
            self.data.validate()
            self.image.validate()
            self.mask.validate()
            self.transforms.validate(families)
            self.inference.validate()
            self.baseline.validate()
            self.model.to_model_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        thresholds = self.evaluation.curve_thresholds_mm
        if thresholds != sorted(thresholds):
            raise ConfigError("evaluation.curve_thresholds_mm must be sorted ascending")


# Top-level shortcuts for the most common hyperparameters
KEY_ALIASES = {
    "K": ["train.K"],
    "k": ["train.K"],
    "epochs": ["train.epochs"],
    "batch_size": ["train.batch_size"],
    "learning_rate": ["train.learning_rate"],
    "lr": ["train.learning_rate"],
    "weight_decay": ["train.weight_decay"],
    "wd": ["train.weight_decay"],
    "m_pos": ["train.m_pos"],
    "m_neg": ["train.m_neg"],
    "thresh_pixels": ["train.thresh_pixels"],
    "seed": ["train.seed"],
    "thresh_landmark": ["inference.thresh_landmark"],
    "cell_px": ["train.cell_px", "inference.cell_px"]
}


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value: Any, tp, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, inner[0], path)

    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"Type mismatch at '{path}': expected a list, got {type(value).__name__} ({value!r})")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]

    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"Type mismatch at '{path}': expected a table, got {type(value).__name__}")
        return _build(tp, value, path)

    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is str:
        if isinstance(value, str):
            return value
    raise ConfigError(f"Type mismatch at '{path}': expected {_type_name(tp)}, got {type(value).__name__} ({value!r})")


def _build(cls, values: Dict[str, Any], prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = [key for key in values if key not in names]
    if unknown:
        where = f" in '{prefix}'" if prefix else ""
        raise ConfigError(
            f"Unknown key '{unknown[0]}'{where}. Valid keys: {', '.join(names)}"
        )
    kwargs = {}
    for key, value in values.items():
        path = f"{prefix}.{key}" if prefix else key
        kwargs[key] = _coerce(value, hints[key], path)
    return cls(**kwargs)


def _set_path(tree: Dict[str, Any], dotted: str, value: Any):
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        existing = node.get(part)
        if existing is None:
            existing = node[part] = {}
        elif not isinstance(existing, dict):
            raise ConfigError(f"Type mismatch at '{part}': expected a table")
        node = existing
    node[parts[-1]] = value


def _expand_aliases(raw: Dict[str, Any]) -> Dict[str, Any]:
    tree = {key: value for key, value in raw.items() if key not in KEY_ALIASES}
    for key, value in raw.items():
        for target in KEY_ALIASES.get(key, []):
            _set_path(tree, target, value)
    return tree


def load_config_file(path: str) -> Dict[str, Any]:
    if not os.path.isfile(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.lower().endswith(".toml"):
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        else:
            with open(path, "r", encoding="utf-8") as f:
                raw = yaml.safe_load(f)
    except (yaml.YAMLError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Malformed config file {path}: {e}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"Config file {path} must contain a mapping at the top level")
    return raw


def parse_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults, then the file, then dotted-path overrides (overrides win)"""
    tree = _expand_aliases(load_config_file(path)) if path else {}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        for target in KEY_ALIASES.get(dotted, [dotted]):
            _set_path(tree, target, value)

    config = _build(RunConfig, tree)
    config.validate()
    logger.debug("Effective config: %s", config.to_dict())
    return config


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


def write_effective_config(config: RunConfig) -> str:
    """Echo the effective configuration into the run directory"""
    path = os.path.join(config.run_dir, PATHS["effective_config"])
    atomic_write_text(path, dump_config(config))
    return path
