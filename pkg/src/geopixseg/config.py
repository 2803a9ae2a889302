"""Configuration dataclasses and the layered run configuration.

A run is driven by a single RunConfig resolved as defaults < config file
< CLI overrides. The resolved document is serialized alongside every
output artifact so runs stay reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigurationError

SEED_ENV_VAR = "GEOPIX_SEED"

# Shipped prompt templates. <IMAGE> expands into the visual token
# sequence, <DESCRIPTION> into the instruction text, <ANSWER> into the
# answer text during training on the reasoning task.
REASONING_TEMPLATE = (
    "USER: This is an image <IMAGE>, please doing geospatial pixel reasoning "
    "according to the following instruction: <DESCRIPTION>. ASSISTANT: <ANSWER>"
)
REFERRING_TEMPLATE = (
    "USER: This is an image <IMAGE>, please doing referring segmentation "
    "according to the following instruction: <DESCRIPTION>. ASSISTANT: <ANSWER>"
)


@dataclass
class EncoderConfig:
    """Hierarchical windowed-attention encoder (4 stages, strides 4/8/16/32)."""

    embed_dim: int = 32
    depths: tuple[int, ...] = (1, 1, 2, 1)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    window_size: int = 4
    frozen: bool = False
    in_channels: int = 3
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigurationError("encoder needs exactly 4 stages")
        if self.embed_dim % self.heads[0] != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads[0] {self.heads[0]}"
            )
        for i, h in enumerate(self.heads):
            if (self.embed_dim * 2**i) % h != 0:
                raise ConfigurationError(f"stage {i} channels not divisible by heads {h}")

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(self.embed_dim * 2**i for i in range(4))


@dataclass
class ConnectorConfig:
    """Token compression connector: d stacked [LN -> strided conv] blocks."""

    d: int = 1
    in_channels: int = 256
    out_dim: int = 128
    kernel: int = 3
    stride: int = 2

    def __post_init__(self) -> None:
        if self.d < 0:
            raise ConfigurationError("connector depth d must be >= 0")
        if self.stride != 2:
            raise ConfigurationError("connector stride is fixed at 2")


@dataclass
class LMConfig:
    """Decoder-only causal language model."""

    hidden_size: int = 128
    layers: int = 4
    heads: int = 4
    max_positions: int = 512
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if self.hidden_size % self.heads != 0:
            raise ConfigurationError(
                f"hidden_size {self.hidden_size} not divisible by heads {self.heads}"
            )


@dataclass
class MaskDecoderConfig:
    """D-Projector, pixel decoder and masked-attention query decoder."""

    mask_dim: int = 64
    layers: int = 3
    heads: int = 4
    ffn_dim: int = 256
    threshold: float = 0.5


@dataclass
class ModelConfig:
    image_size: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    mask_decoder: MaskDecoderConfig = field(default_factory=MaskDecoderConfig)
    templates: dict[str, str] = field(
        default_factory=lambda: {
            "reasoning": REASONING_TEMPLATE,
            "referring": REFERRING_TEMPLATE,
        }
    )
    # Per-channel normalization constants (large-corpus defaults).
    pixel_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    pixel_std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self) -> None:
        if self.image_size % 32 != 0:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by 32")
        side = self.image_size // 32
        if side % (2**self.connector.d) != 0:
            raise ConfigurationError(
                f"stride-32 side {side} not divisible by 2^d={2**self.connector.d}; "
                "lower connector d or raise image_size"
            )


@dataclass
class LossConfig:
    w_focal: float = 1.0
    w_dice: float = 1.0
    w_text_ce: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0

    def __post_init__(self) -> None:
        for name in ("w_focal", "w_dice", "w_text_ce"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")


@dataclass
class TrainConfig:
    """Optimizer and schedule defaults follow the full-scale recipe."""

    lr: float = 1e-4
    schedule: str = "cosine"
    batch_size: int = 16
    steps: int = 2220
    warmup_ratio: float = 0.03
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    precision: str = "fp32"
    freeze_encoder: bool = True
    checkpoint_every: int = 0  # 0 = final checkpoint only
    eval_every: int = 0  # 0 = no periodic train-set eval
    target_giou: float = 0.0  # early stop once periodic eval reaches this

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.precision not in ("fp32", "bf16"):
            raise ConfigurationError(f"unknown precision {self.precision!r}")
        if self.schedule != "cosine":
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")


@dataclass
class DataConfig:
    root: str = ""
    split: str = "train"
    flatten_questions: bool = True
    target_size: int = 0  # 0 = use model.image_size


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        return _build(cls, doc, context="run config")

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")
        return cls.from_dict(doc)

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Apply dotted-key overrides, e.g. {"train.steps": 10}."""
        doc = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            node = doc
            parts = key.split(".")
            for part in parts[:-1]:
                if part not in node:
                    raise ConfigurationError(f"unknown config field {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigurationError(f"unknown config field {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(doc)


def _build(cls: type, doc: dict[str, Any], context: str) -> Any:
    """Construct a dataclass tree from a plain dict, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in doc.items():
        if key not in fields:
            raise ConfigurationError(f"unknown field {key!r} in {context}")
        ftype = fields[key].type
        target = _NESTED.get((cls.__name__, key))
        if target is not None and isinstance(value, dict):
            kwargs[key] = _build(target, value, context=f"{context}.{key}")
        elif isinstance(value, list) and "tuple" in str(ftype):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad {context}: {exc}") from exc


_NESTED: dict[tuple[str, str], type] = {
    ("RunConfig", "model"): ModelConfig,
    ("RunConfig", "train"): TrainConfig,
    ("RunConfig", "loss"): LossConfig,
    ("RunConfig", "data"): DataConfig,
    ("ModelConfig", "encoder"): EncoderConfig,
    ("ModelConfig", "connector"): ConnectorConfig,
    ("ModelConfig", "lm"): LMConfig,
    ("ModelConfig", "mask_decoder"): MaskDecoderConfig,
}


def resolve_seed(explicit: int | None = None) -> int:
    """Explicit seed wins; GEOPIX_SEED is the environment fallback; else 0."""
    if explicit is not None:
        return explicit
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigurationError(f"{SEED_ENV_VAR}={env!r} is not an integer") from exc
    return 0


def desk_preset() -> RunConfig:
    """CPU-trainable configuration: 64 px inputs, tiny encoder/LM/decoder."""
    return RunConfig(
        model=ModelConfig(
            image_size=64,
            encoder=EncoderConfig(embed_dim=32, depths=(1, 1, 2, 1), heads=(1, 2, 4, 8), window_size=4),
            connector=ConnectorConfig(d=1, in_channels=256, out_dim=128),
            lm=LMConfig(hidden_size=128, layers=4, heads=4, max_positions=512),
            mask_decoder=MaskDecoderConfig(mask_dim=64, layers=3, heads=4, ffn_dim=256),
        ),
        train=TrainConfig(lr=1e-3, batch_size=8, steps=500, freeze_encoder=False),
    )


def full_preset() -> RunConfig:
    """Full-scale configuration mirroring the published recipe; requires
    pretrained weights and accelerator hardware to be useful."""
    return RunConfig(
        model=ModelConfig(
            image_size=1024,
            encoder=EncoderConfig(
                embed_dim=128, depths=(2, 2, 18, 2), heads=(4, 8, 16, 32), window_size=12, frozen=True
            ),
            connector=ConnectorConfig(d=2, in_channels=1024, out_dim=2048),
            lm=LMConfig(hidden_size=2048, layers=24, heads=32, max_positions=2048),
            mask_decoder=MaskDecoderConfig(mask_dim=256, layers=9, heads=8, ffn_dim=2048),
        ),
        train=TrainConfig(lr=1e-4, batch_size=16, steps=2220, freeze_encoder=True, precision="bf16"),
    )
