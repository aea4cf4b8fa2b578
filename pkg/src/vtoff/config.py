"""Model and run configuration.

``ModelConfig`` pins every architectural extent; ``RunConfig`` adds data,
training, and output settings and round-trips through a plain-text
key=value file.  Desk-scale defaults keep a full training run in CPU
minutes; the corresponding full-scale reference values are recorded in
``FULL_SCALE_REFERENCE`` for orientation only and are never instantiated
here.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

# Published large-scale configuration these desk defaults are scaled down
# from: kept for documentation, not buildable in this package.
FULL_SCALE_REFERENCE = {
    "latent_grid": (64, 48),          # 3072 latent tokens
    "latent_channels": 16,            # 8x-compressing learned autoencoder
    "text_tokens": 77,
    "text_width": 4096,
    "pooled_width": 2048,
    "backbone_blocks": 24,
    "aligner_tap_block": 8,           # best of {6, 8, 12, 18}
    "reference_token_grid": (32, 32), # 1024 tokens from the frozen encoder
    "batch_size": 32,
    "train_steps": 30_000,
    "learning_rate": 1e-4,
    "warmup_steps": 3_000,
    "align_weight": 0.5,
}

# Structural attribute slots; lower-body garments carry the 4-slot subset.
SLOT_NAMES = ("cloth_type", "waist", "fit", "hem", "neckline",
              "sleeve_length", "cloth_length")
SLOT_CARDINALITIES = {
    "cloth_type": 3, "waist": 3, "fit": 3, "hem": 3,
    "neckline": 4, "sleeve_length": 4, "cloth_length": 3,
}
CATEGORY_NAMES = ("upper", "lower", "dress")
CATEGORY_SLOTS = {
    "upper": ("cloth_type", "waist", "fit", "hem", "neckline",
              "sleeve_length", "cloth_length"),
    "lower": ("cloth_type", "waist", "fit", "cloth_length"),
    "dress": ("cloth_type", "waist", "fit", "hem", "neckline",
              "sleeve_length", "cloth_length"),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture extents shared by both transformer networks."""

    image_h: int = 32
    image_w: int = 24
    patch: int = 2          # spatial compression factor f
    layers: int = 6
    dim: int = 128
    heads: int = 4
    mlp_ratio: float = 2.0
    text_dim: int = 64
    text_capacity: int = 8  # positional-table capacity for text tokens
    pool_dim: int = 64
    ref_dim: int = 96       # frozen reference encoder token width (!= dim)
    ref_grid: int = 4       # frozen reference encoder token grid extent
    aligner_block: int = 2  # tap depth, same relative depth as 8 of 24
    t_dim: int = 64         # sinusoidal timestep feature width

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 1 <= self.aligner_block <= self.layers:
            raise ConfigError(
                f"aligner_block {self.aligner_block} outside 1..{self.layers}")
        if self.text_capacity < max(len(v) for v in CATEGORY_SLOTS.values()):
            raise ConfigError("text_capacity smaller than the largest slot count")
        for name in ("image_h", "image_w", "patch", "layers", "dim", "heads",
                     "text_dim", "text_capacity", "pool_dim", "ref_dim",
                     "ref_grid", "t_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch

    @property
    def seq_len(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def channels(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def extractor_in_channels(self) -> int:
        # noisy latent + binary mask + masked-person latent, in that order
        return 2 * self.channels + 1

    @property
    def mlp_hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


@dataclass
class RunConfig:
    """Everything a command needs, parseable from a key=value file.

    Unknown keys are rejected; every field below is its documented default.
    """

    # architecture
    image_h: int = 32
    image_w: int = 24
    patch: int = 2
    layers: int = 6
    dim: int = 128
    heads: int = 4
    mlp_ratio: float = 2.0
    text_dim: int = 64
    text_capacity: int = 8
    pool_dim: int = 64
    ref_dim: int = 96
    ref_grid: int = 4
    aligner_block: int = 2
    t_dim: int = 64
    # objectives
    extractor_target: str = "noise"
    generator_target: str = "sample"
    lambda_align: float = 0.5
    use_extractor: bool = True    # disable to run the no-conditioning ablation
    sync_timestep: bool = False   # rebuild the cache at the training t instead of 0
    # data
    seed: int = 7
    train_size: int = 512
    test_size: int = 64
    occluder_prob: float = 0.3
    mix_upper: float = 0.4
    mix_lower: float = 0.3
    mix_dress: float = 0.3
    # optimization
    batch_size: int = 16
    stage1_steps: int = 2000
    stage2_steps: int = 5000
    lr: float = 1e-3
    warmup: int = 200
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_dtype: str = "float32"
    # sampling
    sampler_steps: int = 28
    # locations
    data_dir: str = "data"
    out_dir: str = "out"

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in dataclasses.asdict(self).items()
                              if k in names})

    def validate(self) -> "RunConfig":
        self.model_config()
        if self.extractor_target not in ("noise", "sample"):
            raise ConfigError(f"extractor_target must be noise|sample, got {self.extractor_target}")
        if self.generator_target not in ("noise", "sample"):
            raise ConfigError(f"generator_target must be noise|sample, got {self.generator_target}")
        if self.train_dtype not in ("float32", "float64"):
            raise ConfigError(f"train_dtype must be float32|float64, got {self.train_dtype}")
        if self.warmup >= max(self.stage1_steps, self.stage2_steps):
            raise ConfigError("warmup must be smaller than the stage step budget")
        if not 0.0 <= self.occluder_prob <= 1.0:
            raise ConfigError("occluder_prob outside [0, 1]")
        mix = self.mix_upper + self.mix_lower + self.mix_dress
        if abs(mix - 1.0) > 1e-9:
            raise ConfigError(f"category mix must sum to 1, got {mix}")
        if self.batch_size < 1 or self.sampler_steps < 1:
            raise ConfigError("batch_size and sampler_steps must be >= 1")
        return self

    def apply(self, overrides: dict) -> "RunConfig":
        """Set key=value overrides (strings are cast to the field type)."""
        known = {f.name: f for f in fields(RunConfig)}
        for key, raw in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kind = known[key].type
            current = getattr(self, key)
            if isinstance(raw, str):
                try:
                    if kind == "bool" or isinstance(current, bool):
                        value = _parse_bool(raw)
                    elif isinstance(current, int):
                        value = int(raw)
                    elif isinstance(current, float):
                        value = float(raw)
                    else:
                        value = raw
                except ValueError as err:
                    raise ConfigError(f"bad value for {key}: {raw!r}") from err
            else:
                value = raw
            setattr(self, key, value)
        return self

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(RunConfig)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        overrides = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
            key, _, raw = stripped.partition("=")
            overrides[key.strip()] = raw.strip()
        cfg.apply(overrides)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())
