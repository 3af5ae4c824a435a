"""Run configuration: dataclass sections plus a canonical ``key = value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    stem_channels: int = 16
    # coarse (stage 1) to fine (stage 3)
    widths: tuple[int, int, int] = (32, 24, 16)
    blocks_per_stage: int = 2
    heads: int = 2
    window: int = 4
    shift_windows: bool = False
    mlp_ratio: int = 2
    gamma: float = 100.0

    def validate(self) -> None:
        if self.image_size % 8:
            raise ConfigError(f"image_size must be divisible by 8, got {self.image_size}")
        if len(self.widths) != 3:
            raise ConfigError("widths needs exactly three entries")
        for d in self.widths:
            if d % self.heads:
                raise ConfigError(f"width {d} not divisible by heads {self.heads}")
        if (self.image_size // 8) % self.window:
            raise ConfigError("coarsest stage must tile exactly into windows")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")


@dataclass
class DetectorConfig:
    embed_dim: int = 16
    proj_hidden: int = 32
    map_dim: int = 16
    classifier_hidden: int = 16
    tau_loss: float = 0.1
    tau_conf: float = 0.25
    theta_hi: float = 0.9
    theta_lo: float = 0.65
    n_queries: int = 64
    n_pos: int = 8
    n_neg: int = 8
    rep_cap: int = 256
    query_cap: int = 256
    kmeans_iters: int = 20
    kmeans_candidates: int = 64
    printed_confidence_sign: bool = False

    def validate(self) -> None:
        if not 0.5 <= self.theta_lo < self.theta_hi <= 1.0:
            raise ConfigError(f"need 0.5 <= theta_lo < theta_hi <= 1, got {self.theta_lo}, {self.theta_hi}")
        if self.tau_loss <= 0 or self.tau_conf <= 0:
            raise ConfigError("temperatures must be positive")
        if min(self.n_pos, self.n_neg, self.n_queries, self.rep_cap) < 1:
            raise ConfigError("sample counts must be >= 1")


@dataclass
class TrainConfig:
    lambda_pixel: float = 1.0
    lambda_perc: float = 0.0
    lambda_cl: float = 0.01
    lambda_adv: float = 0.0
    lambda_cls: float = 0.01
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        lams = (self.lambda_pixel, self.lambda_perc, self.lambda_cl, self.lambda_adv, self.lambda_cls)
        if min(lams) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.lambda_perc != 0 or self.lambda_adv != 0:
            raise ConfigError("perceptual and adversarial terms are not implemented; their weights must be 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.detector.validate()
        self.train.validate()
        return self

    def to_text(self) -> str:
        lines = []
        for section in ("model", "detector", "train"):
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            section, _, name = key.partition(".")
            obj = getattr(cfg, section, None) if section in ("model", "detector", "train") else None
            hints = get_type_hints(type(obj)) if obj is not None else {}
            if name not in hints:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            setattr(obj, name, _parse(value, hints[name], key))
        return cfg.validate()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(value: str, typ, key: str):
    try:
        if typ is bool:
            if value.lower() not in ("true", "false"):
                raise ValueError(value)
            return value.lower() == "true"
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if getattr(typ, "__origin__", None) is tuple:
            return tuple(int(x) for x in value.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    raise ConfigError(f"unsupported type for {key}")
