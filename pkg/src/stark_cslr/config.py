"""Architecture and training configuration, read from flat ``key=value`` files.

Example file::

    # paper defaults, spelled out
    channels = 64,96,128,256
    heads = 6
    head_dim = 32
    lr = 1e-3

Blank lines and ``#`` comments are ignored; an unknown key is an error.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StarkConfig:
    """Encoder and decoder architecture."""

    in_channels: int = 3
    stem_channels: int = 64
    channels: tuple[int, ...] = (64, 96, 128, 256)
    heads: int = 6
    head_dim: int = 32
    kernel: int = 5
    stride: int = 1
    ffn_expansion: int = 2
    slope: float = 0.01
    pools: int = 2
    dec_hidden: int = 1024
    dec_ffn: int = 2048
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    layout: str = "paper79"
    streams: str = "all"

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.stride != 1:
            raise ConfigError("only patch stride 1 is supported")
        if self.in_channels != 3:
            raise ConfigError("inputs carry exactly 3 channels (x, y, confidence)")
        if min((self.stem_channels, self.heads, self.head_dim, self.ffn_expansion,
                self.dec_hidden, self.dec_ffn), default=1) < 1:
            raise ConfigError("widths, heads and expansion must be positive")
        if any(c < 1 for c in self.channels):
            raise ConfigError(f"channel widths must be positive: {self.channels}")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError("slope must lie in (0, 1)")
        if self.streams not in ("all", "fuse"):
            raise ConfigError(f"streams must be 'all' or 'fuse', got {self.streams!r}")

    @property
    def out_channels(self) -> int:
        return self.channels[-1] if self.channels else self.stem_channels


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    decoupled_wd: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t_max: int = 100
    eta_min: float = 0.0
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    augment: bool = True
    speed_min: float = 0.5
    speed_max: float = 1.5
    rotation_deg: float = 15.0
    distill_weight: float = 1.0
    temperature: float = 8.0
    kl_direction: str = "teacher_student"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.t_max < 1:
            raise ConfigError("lr, batch_size, epochs and t_max must be positive")
        if self.weight_decay < 0 or self.temperature <= 0 or self.distill_weight < 0:
            raise ConfigError("weight_decay, temperature and distill_weight must be non-negative")
        if self.kl_direction not in ("teacher_student", "student_teacher"):
            raise ConfigError(f"unknown kl_direction {self.kl_direction!r}")
        if not 0 < self.speed_min <= self.speed_max:
            raise ConfigError("speed range must be positive and ordered")


def _coerce(raw: str, annotation: str, key: str):
    try:
        if annotation == "int":
            return int(raw)
        if annotation == "float":
            return float(raw)
        if annotation == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if annotation.startswith("tuple"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str) -> tuple[StarkConfig, TrainConfig]:
    model_keys = {f.name: f.type for f in fields(StarkConfig)}
    train_keys = {f.name: f.type for f in fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in model_keys:
            model_kw[key] = _coerce(raw, str(model_keys[key]), key)
        elif key in train_keys:
            train_kw[key] = _coerce(raw, str(train_keys[key]), key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return StarkConfig(**model_kw), TrainConfig(**train_kw)


def load_config(path: str | Path) -> tuple[StarkConfig, TrainConfig]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(model: StarkConfig, train: TrainConfig | None = None) -> str:
    lines = []
    for cfg in (model, train):
        if cfg is None:
            continue
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def fingerprint(model: StarkConfig, layout, vocab_size: int) -> str:
    """Hash of everything that fixes parameter shapes."""
    payload = {
        "model": dataclasses.asdict(model),
        "layout": [layout.name, layout.num_points, [list(ix) for ix in layout.streams().values()]],
        "vocab_size": vocab_size,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
