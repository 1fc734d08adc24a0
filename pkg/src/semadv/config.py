"""Declarative experiment configuration: schema, defaults, and YAML I/O.

One :class:`ExperimentConfig` describes a full run — dataset recipe, noise
schedule, every training stage, attribute prompts, generation plan, attack
settings, and evaluation choices. Configs are plain nested dataclasses so the
schema is the code; :func:`load_config` reads a YAML document with strict
unknown-key rejection, overlaying the keys it finds onto the default desk
profile (an empty document therefore reproduces the default run exactly).
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

import yaml

from .attack import AttackConfig
from .data import AttributeAxis, ShapeClass, SyntheticDatasetConfig, default_dataset_config
from .losses import LossWeights
from .trainer import TrainerConfig

__all__ = [
    "ScheduleConfig",
    "DenoiserConfig",
    "EncoderConfig",
    "ClassBias",
    "ClassifierConfig",
    "AttributePrompt",
    "PlanConfig",
    "CalibrationConfig",
    "AttackStageConfig",
    "EvaluationConfig",
    "ExperimentConfig",
    "ConfigError",
    "default_config",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "save_config",
]


class ConfigError(ValueError):
    """A config document references unknown keys or fails validation."""


@dataclass(frozen=True)
class ScheduleConfig:
    """Variance-schedule parameters for the diffusion process."""

    steps: int = 240
    beta_min: float = 8e-4
    beta_max: float = 0.06

    def __post_init__(self) -> None:
        if self.steps < 2:
            raise ConfigError(f"schedule.steps must be >= 2, got {self.steps}")
        if not (0.0 < self.beta_min <= self.beta_max < 1.0):
            raise ConfigError(
                f"schedule betas must satisfy 0 < beta_min <= beta_max < 1, "
                f"got ({self.beta_min}, {self.beta_max})"
            )


@dataclass(frozen=True)
class DenoiserConfig:
    """Noise-prediction network training stage."""

    epochs: int = 120
    lr: float = 1e-3
    batch_size: int = 128
    val_fraction: float = 0.1
    arch: Optional[dict] = None


@dataclass(frozen=True)
class EncoderConfig:
    """Contrastive image/text encoder-pair training stage."""

    embed_dim: int = 32
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    val_fraction: float = 0.1
    arch: Optional[dict] = None


@dataclass(frozen=True)
class ClassBias:
    """Range overrides for one shape class in the attacked model's train set.

    Sampling the named class with shifted fill/background ranges correlates
    image luminance with the label, so the attacked classifier learns a
    brightness shortcut while the auxiliary classifier — trained on the
    unbiased dataset — keeps judging by shape. Semantic edits that move
    luminance then flip one model but not the other, which is the disagreement
    the attack exploits.
    """

    class_name: str
    fill_range: Tuple[float, float]
    background_range: Tuple[float, float]
    seed: int = 0


@dataclass(frozen=True)
class ClassifierConfig:
    """Attacked + auxiliary classifier training stage."""

    epochs: int = 16
    lr: float = 2e-3
    batch_size: int = 64
    val_fraction: float = 0.2
    accuracy_floor: float = 0.95
    conv_arch: Optional[dict] = None
    aux_arch: Optional[dict] = None
    target_bias: Tuple[ClassBias, ...] = ()


@dataclass(frozen=True)
class AttributePrompt:
    """Name and caption pair for one trainable semantic attribute."""

    name: str
    source_text: str
    target_text: str

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("attribute name must be non-empty")
        if self.source_text == self.target_text:
            raise ConfigError(f"attribute {self.name!r}: captions must differ")


@dataclass(frozen=True)
class PlanConfig:
    """Generation plan: subsequence length and phase markers."""

    steps: int = 40
    t_edit: int = 197
    t_boost: int = 18
    use_calibrated_markers: bool = False

    def __post_init__(self) -> None:
        if self.steps < 2:
            raise ConfigError(f"plan.steps must be >= 2, got {self.steps}")


@dataclass(frozen=True)
class CalibrationConfig:
    """Phase-marker measurement stage (reported; optionally applied)."""

    probe_count: int = 8
    edit_threshold: float = 0.33
    boost_threshold: float = 1.2
    mode: str = "absolute"


@dataclass(frozen=True)
class AttackStageConfig:
    """Attack stage: sample budget, class roles, and engine settings."""

    n_seeds: int = 100
    y_source: int = 0
    y_target: int = 1
    screen_sources: bool = True
    seed_offset: int = 1000
    engine: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self) -> None:
        if self.n_seeds < 1:
            raise ConfigError(f"attack.n_seeds must be >= 1, got {self.n_seeds}")
        if self.y_source == self.y_target:
            raise ConfigError("attack source and target classes must differ")


@dataclass(frozen=True)
class EvaluationConfig:
    """Metric and defense selections for the evaluation stage."""

    defenses: Tuple[str, ...] = ("identity", "jpeg", "feature_squeeze")
    jpeg_quality: int = 75
    fs_false_positive_target: float = 0.05
    n_reference: int = 256
    grid_samples: int = 16

    def __post_init__(self) -> None:
        known = {"identity", "jpeg", "feature_squeeze"}
        unknown = set(self.defenses) - known
        if unknown:
            raise ConfigError(f"unknown defenses {sorted(unknown)}; known: {sorted(known)}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one experiment run."""

    seed: int = 0
    dataset: SyntheticDatasetConfig = field(default_factory=default_dataset_config)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    classifiers: ClassifierConfig = field(default_factory=ClassifierConfig)
    attributes: Tuple[AttributePrompt, ...] = ()
    attribute_training: TrainerConfig = field(default_factory=TrainerConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    attack: AttackStageConfig = field(default_factory=AttackStageConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self) -> None:
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate attribute names in {names}")
        class_names = {c.name for c in self.dataset.classes}
        for bias in self.classifiers.target_bias:
            if bias.class_name not in class_names:
                raise ConfigError(
                    f"target_bias references unknown class {bias.class_name!r}; "
                    f"dataset defines {sorted(class_names)}"
                )
        n_classes = len(self.dataset.classes)
        for role, label in (("y_source", self.attack.y_source), ("y_target", self.attack.y_target)):
            if not (0 <= label < n_classes):
                raise ConfigError(f"attack.{role}={label} outside the {n_classes}-class dataset")
        if self.plan.steps > self.schedule.steps:
            raise ConfigError(
                f"plan.steps={self.plan.steps} exceeds schedule.steps={self.schedule.steps}"
            )
        for marker in ("t_edit", "t_boost"):
            value = getattr(self.plan, marker)
            if not (0 <= value <= self.schedule.steps):
                raise ConfigError(f"plan.{marker}={value} outside [0, {self.schedule.steps}]")


def default_config() -> ExperimentConfig:
    """The locked desk profile: a complete, runnable two-class experiment.

    The attacked classifier is deliberately small and trained on a
    luminance-biased draw (dim dark discs vs. brighter boxes on lighter
    ground), so its decision rule rides global brightness; the auxiliary
    classifier trains unbiased and keeps judging by shape. The three
    adversarial attributes steer tone, background, and edge sharpness — the
    directions that move the attacked model without disturbing the auxiliary
    one.
    """
    source = "a small dark disc with soft edges on a dim background"
    return ExperimentConfig(
        seed=0,
        dataset=default_dataset_config(n_per_class=256, seed=0),
        classifiers=ClassifierConfig(
            accuracy_floor=0.95,
            conv_arch={"base_channels": 4, "feature_dim": 8},
            target_bias=(
                ClassBias("disc", fill_range=(0.0, 0.35), background_range=(-0.9, -0.7), seed=11),
                ClassBias("box", fill_range=(0.55, 0.9), background_range=(-0.5, -0.3), seed=12),
            ),
        ),
        attributes=(
            AttributePrompt("tone", source, "a small bright disc with soft edges on a dim background"),
            AttributePrompt("bg", source, "a small dark disc with soft edges on a light background"),
            AttributePrompt("edge", source, "a small dark disc with sharp edges on a dim background"),
        ),
        attribute_training=TrainerConfig(
            s_inv=40,
            epochs=4,
            n_samples=64,
            lr=1e-2,
            weights=LossWeights(lambda_reg=2.0, lambda_adv=0.2),
        ),
        plan=PlanConfig(steps=40, t_edit=197, t_boost=18),
        attack=AttackStageConfig(
            n_seeds=100,
            engine=AttackConfig(
                iterations=40,
                lr=0.2,
                lr_growth=1.3,
                loss_weights=LossWeights(lambda_1=1.0, lambda_2=10.0),
            ),
        ),
    )


# --- dict <-> dataclass conversion -----------------------------------------

_OPAQUE_DICT_FIELDS = {"arch", "conv_arch", "aux_arch"}


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _build_value(tp, value, path: str, base=None):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if origin is typing.Union:  # Optional[X] and friends
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        if len(inner) == 1:
            return _build_value(inner[0], value, path, base)
        raise ConfigError(f"{path}: unsupported union type {tp}")

    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(
                _build_value(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)
            )
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(
            _build_value(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value))
        )

    if _is_dataclass_type(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return _build_dataclass(tp, value, path, base)

    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return dict(value)

    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config field type {tp!r}")


def _build_dataclass(cls, data: dict, path: str, base=None):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} under {path or 'top level'}; "
            f"known keys: {sorted(known)}"
        )
    kwargs = {}
    for f in fields(cls):
        sub_path = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            if f.name in _OPAQUE_DICT_FIELDS and isinstance(data[f.name], dict):
                kwargs[f.name] = dict(data[f.name])
            else:
                sub_base = getattr(base, f.name, None) if base is not None else None
                kwargs[f.name] = _build_value(hints[f.name], data[f.name], sub_path, sub_base)
        elif base is not None:
            kwargs[f.name] = getattr(base, f.name)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"missing required key {sub_path!r}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def config_from_dict(data: dict, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a plain mapping.

    Keys present in ``data`` override the corresponding values of ``base``
    (the default desk profile unless another base is given); mappings merge
    recursively, while lists replace the base value wholesale. Unknown keys
    raise :class:`ConfigError` with the offending dotted path.
    """
    if base is None:
        base = default_config()
    if not isinstance(data, dict):
        raise ConfigError(f"config document must be a mapping, got {type(data).__name__}")
    return _build_dataclass(ExperimentConfig, data, "", base)


def config_to_dict(cfg) -> dict:
    """Recursively convert a config dataclass to YAML-friendly primitives."""

    def convert(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: convert(getattr(value, f.name)) for f in fields(value)}
        if isinstance(value, (list, tuple)):
            return [convert(v) for v in value]
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        return value

    return convert(cfg)


def load_config(path: str | Path, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Read a YAML config file; absent keys fall back to the desk profile."""
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    return config_from_dict(data, base=base)


def save_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    """Write the full resolved config as YAML (the run-directory copy)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    return path
