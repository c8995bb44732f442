"""Configuration dataclasses and YAML round-tripping.

Every run resolves to a single ``RunConfig`` which nests the synthetic-data,
backbone and training sections. Configs load from one YAML file plus
``key.subkey=value`` overrides, and every run writes its resolved config back
out so results are reproducible from the artifact alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ValidationError


@dataclass
class SynthSpec:
    """Knobs for the synthetic lesion generator."""

    image_size: int = 64
    n_blobs: int = 1
    vessel_density: float = 0.3
    noise_level: float = 0.05
    artifact_level: float = 0.3

    def validate(self) -> None:
        if self.image_size < 32:
            raise ValidationError(f"image_size must be >= 32, got {self.image_size}")
        if self.n_blobs < 1:
            raise ValidationError(f"n_blobs must be >= 1, got {self.n_blobs}")
        if not 0.0 <= self.vessel_density <= 1.0:
            raise ValidationError(
                f"vessel_density must be in [0, 1], got {self.vessel_density}"
            )
        if self.noise_level < 0 or self.artifact_level < 0:
            raise ValidationError("noise_level and artifact_level must be >= 0")


@dataclass
class BackboneConfig:
    """Shape of the nested-U encoder/decoder pair.

    ``channels`` are the five tap widths; ``dilations`` the dilation used by
    each level's innermost convolution. ``routed_channels`` is the common
    width all task feature maps are projected to before graph reasoning.
    """

    base_channels: int = 16
    routed_channels: int = 64
    dilations: tuple[int, ...] = (3, 3, 2, 2, 2)
    dropout_rate: float = 0.5
    mc_dropout_active: bool = False
    strict_input_check: bool = True

    depth: int = 5

    @property
    def channels(self) -> tuple[int, ...]:
        b = self.base_channels
        return (b, int(b * 1.5), b * 2, b * 3, b * 4)

    def validate(self) -> None:
        if self.depth != 5:
            raise ValidationError(f"depth is fixed at 5, got {self.depth}")
        if len(self.dilations) != 5 or any(d < 1 for d in self.dilations):
            raise ValidationError("dilations must be 5 positive integers")
        if self.base_channels < 2:
            raise ValidationError("base_channels must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)")


@dataclass
class GraphConfig:
    """Node counts and widths for the graph reasoning blocks."""

    num_nodes: int = 12
    attention_dim: int = 0  # 0 -> same as routed channel width
    activation: str = "relu"
    support_topk: int = 0  # 0 -> every support node participates; else k-NN
    fusion: str = "add"  # "add" | "concat"

    def validate(self) -> None:
        if self.num_nodes < 1:
            raise ValidationError("num_nodes must be >= 1")
        if self.activation not in ("relu", "leaky_relu", "identity"):
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.fusion not in ("add", "concat"):
            raise ValidationError(f"unknown fusion {self.fusion!r}")
        if self.support_topk < 0:
            raise ValidationError("support_topk must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-4
    input_size: int = 64
    mc_samples: int = 10  # stochastic forward passes per uncertainty estimate
    weight_update_period: int = 50
    seed: int = 0
    augment: bool = False
    # ablation toggles
    use_boundary_task: bool = True
    use_shape_task: bool = True
    use_uncertainty_loss: bool = True
    use_migr: bool = True
    use_mrgr: bool = True
    # cascade / loss details
    two_stage: bool = False
    head_aux_weight: float = 0.5
    pixel_variance_cache: bool = True
    val_batch_size: int = 4
    val_period: int = 10
    log_steps: bool = True

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "input_size", "mc_samples",
                     "weight_update_period", "val_batch_size", "val_period"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValidationError("lr must be > 0 and weight_decay >= 0")
        if self.input_size % 16 != 0:
            raise ValidationError(
                f"input_size must be divisible by 16, got {self.input_size}"
            )
        if (self.use_migr or self.use_mrgr) and not (
                self.use_boundary_task and self.use_shape_task):
            raise ValidationError(
                "graph modules require both boundary and shape tasks")


# Ablation ladder: each named variant toggles auxiliary tasks, the
# uncertainty-weighted loss, and the two graph blocks on top of the previous.
ABLATION_VARIANTS: dict[str, dict[str, bool]] = {
    "M0": dict(use_boundary_task=False, use_shape_task=False,
               use_uncertainty_loss=False, use_migr=False, use_mrgr=False),
    "M1": dict(use_boundary_task=True, use_shape_task=False,
               use_uncertainty_loss=False, use_migr=False, use_mrgr=False),
    "M2": dict(use_boundary_task=True, use_shape_task=True,
               use_uncertainty_loss=False, use_migr=False, use_mrgr=False),
    "M3": dict(use_boundary_task=True, use_shape_task=True,
               use_uncertainty_loss=True, use_migr=False, use_mrgr=False),
    "M*1": dict(use_boundary_task=True, use_shape_task=True,
                use_uncertainty_loss=True, use_migr=True, use_mrgr=False),
    "M*2": dict(use_boundary_task=True, use_shape_task=True,
                use_uncertainty_loss=True, use_migr=False, use_mrgr=True),
    "M*3": dict(use_boundary_task=True, use_shape_task=True,
                use_uncertainty_loss=True, use_migr=True, use_mrgr=True),
}


def apply_variant(train: "TrainConfig", name: str) -> "TrainConfig":
    if name not in ABLATION_VARIANTS:
        raise ValidationError(
            f"unknown ablation variant {name!r}; pick from {sorted(ABLATION_VARIANTS)}")
    out = dataclasses.replace(train, **ABLATION_VARIANTS[name])
    out.validate()
    return out


@dataclass
class RunConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    boundary_method: str = "morph"  # "morph" | "canny"

    def validate(self) -> "RunConfig":
        self.synth.validate()
        self.backbone.validate()
        self.graph.validate()
        self.train.validate()
        if self.boundary_method not in ("morph", "canny"):
            raise ValidationError(f"unknown boundary_method {self.boundary_method!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"cannot parse {value!r} as bool")
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            return tuple(int(v) for v in value.split(","))
    except ValueError as exc:
        raise ValidationError(
            f"cannot parse {value!r} as {type(current).__name__}") from exc
    return value


def _apply_section(obj, data: dict) -> None:
    for key, val in data.items():
        if not hasattr(obj, key):
            raise ValidationError(f"unknown config key {key!r} for {type(obj).__name__}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and isinstance(val, dict):
            _apply_section(current, val)
        elif isinstance(current, tuple) and isinstance(val, (list, tuple)):
            setattr(obj, key, tuple(val))
        else:
            setattr(obj, key, val)


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional YAML file and dotted overrides."""
    cfg = RunConfig()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"config root must be a mapping, got {type(data)}")
        _apply_section(cfg, data)
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"override {item!r} must look like key.subkey=value")
        dotted, value = item.split("=", 1)
        parts = dotted.split(".")
        obj = cfg
        for part in parts[:-1]:
            if not hasattr(obj, part):
                raise ValidationError(f"unknown config section {part!r}")
            obj = getattr(obj, part)
        leaf = parts[-1]
        if not hasattr(obj, leaf):
            raise ValidationError(f"unknown config key {dotted!r}")
        setattr(obj, leaf, _coerce(value, getattr(obj, leaf)))
    return cfg.validate()


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    _apply_section(cfg, data)
    return cfg.validate()


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
