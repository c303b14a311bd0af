"""Model and training configuration, plus the flat key=value file format.

Config files are diff-friendly text: one ``section.key=value`` per line,
``#`` comments and blank lines ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

from .errors import ConfigError

TRAIN_MODES = ("full", "fixed_kernel", "no_estimator", "no_fvg")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``fusion_width`` is the shared vision-language width C; Cp = C/2 is the
    per-query kernel channel count.  The backbone downsamples by 2 per stage,
    so stages 2..4 sit at 1/4, 1/8 and 1/16 of the input resolution and the
    fused feature grid at 1/8 (one 2x upsample above stage 4).
    """

    image_size: int = 64
    fusion_width: int = 64          # C
    text_global_width: int = 64     # C'
    num_queries: int = 8            # N_q
    max_tokens: int = 17            # L_max, [SOS] and [EOS] included
    heads: int = 4
    text_layers: int = 2
    decoder_layers: int = 2
    backbone_channels: tuple = (16, 32, 64, 64)
    precision: str = "single"       # "single" | "double"
    kernel_activation: str = "relu"  # "relu" | "identity"; escape hatch for
    # the non-negativity of generated kernels

    def __post_init__(self):
        if self.fusion_width % 2 != 0:
            raise ConfigError(f"fusion_width {self.fusion_width} must be even")
        if self.image_size % 16 != 0:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 16")
        if self.fusion_width % self.heads != 0:
            raise ConfigError(
                f"fusion_width {self.fusion_width} not divisible by heads {self.heads}"
            )
        if len(self.backbone_channels) != 4:
            raise ConfigError("backbone_channels needs exactly 4 stages")
        if self.backbone_channels[3] % self.heads != 0:
            raise ConfigError(
                f"stage-4 channels {self.backbone_channels[3]} not divisible by heads"
            )
        if self.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")
        if self.max_tokens < 2:
            raise ConfigError("max_tokens must fit [SOS] and [EOS]")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision {self.precision!r} must be single or double")
        if self.kernel_activation not in ("relu", "identity"):
            raise ConfigError(f"kernel_activation {self.kernel_activation!r} invalid")
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)

    @property
    def kernel_channels(self) -> int:
        return self.fusion_width // 2  # Cp

    @property
    def grid_size(self) -> int:
        """Side length of the fused feature grid (and of F_v3)."""
        return self.image_size // 8

    @property
    def mask_size(self) -> int:
        """Side length of predicted mask logits: 4x the fused grid."""
        return 4 * self.grid_size

    @property
    def num_tokens(self) -> int:
        """Visual token count N entering the decoder."""
        return self.grid_size * self.grid_size


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_power: float = 0.9
    total_steps: Optional[int] = None  # schedule horizon; defaults to steps
    steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    mode: str = "full"
    eval_every: int = 0  # 0 disables periodic evaluation
    data_root: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.steps <= 0:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode {self.mode!r} not one of {TRAIN_MODES}")
        if self.total_steps is None:
            self.total_steps = self.steps


# ---------------------------------------------------------------------------
# flat key=value files


def parse_kv_text(text: str) -> dict:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv_file(path) -> dict:
    return parse_kv_text(Path(path).read_text())


def write_kv_file(path, pairs: dict) -> None:
    lines = [f"{k}={v}" for k, v in pairs.items()]
    Path(path).write_text("\n".join(lines) + "\n")


_MODEL_KEYS = {
    "image_size": int,
    "fusion_width": int,
    "text_global_width": int,
    "num_queries": int,
    "max_tokens": int,
    "heads": int,
    "text_layers": int,
    "decoder_layers": int,
    "precision": str,
    "kernel_activation": str,
}

_TRAIN_KEYS = {
    "lr": float,
    "beta1": float,
    "beta2": float,
    "adam_eps": float,
    "decay_power": float,
    "total_steps": int,
    "steps": int,
    "batch_size": int,
    "seed": int,
    "mode": str,
    "eval_every": int,
    "data_root": str,
    "out_dir": str,
}


def model_config_from_dict(pairs: dict, prefix: str = "model.") -> ModelConfig:
    kwargs = {}
    for key, cast in _MODEL_KEYS.items():
        if prefix + key in pairs:
            kwargs[key] = cast(pairs[prefix + key])
    if prefix + "backbone_channels" in pairs:
        kwargs["backbone_channels"] = tuple(
            int(v) for v in pairs[prefix + "backbone_channels"].split(",")
        )
    return ModelConfig(**kwargs)


def train_config_from_dict(pairs: dict) -> TrainConfig:
    kwargs = {"model": model_config_from_dict(pairs)}
    for key, cast in _TRAIN_KEYS.items():
        if "train." + key in pairs:
            kwargs[key] = cast(pairs["train." + key])
    return TrainConfig(**kwargs)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    pairs = {}
    m = asdict(cfg.model)
    m["backbone_channels"] = ",".join(str(c) for c in cfg.model.backbone_channels)
    for k, v in m.items():
        pairs[f"model.{k}"] = str(v)
    for k in _TRAIN_KEYS:
        pairs[f"train.{k}"] = str(getattr(cfg, k))
    return pairs


def load_train_config(path) -> TrainConfig:
    return train_config_from_dict(read_kv_file(path))
