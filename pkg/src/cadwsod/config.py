"""Training configuration and its flat ``key=value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from .cadm import CadmConfig
from .gcm import FUSION_MODES


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "on", "yes"):
        return True
    if t in ("0", "false", "off", "no"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class TrainConfig:
    # optimizer and schedule
    lr: float = 5e-3
    lr_final: float = 5e-4
    decay_at: int = 1200
    iterations: int = 2000
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    seed: int = 0
    flip_augment: bool = True
    # CADM
    cadm: bool = True
    lambda1: float = 0.8
    lambda2: float = 0.8
    drop_rate: float = 0.8
    cadm_dims: str = "cascade"
    spatial_max_scope: str = "row"
    # GCM
    gcm: bool = True
    fusion_mode: str = "multiplication_then_addition"
    bottleneck_ratio: int = 4
    ln_eps: float = 1e-5
    # head
    K: int = 3
    roi_size: int = 3
    hidden: int = 128
    iou_assign: float = 0.5
    softmax_reading: str = "wsddn"
    include_distill: bool = True
    stage_channels: tuple = (16, 32, 32)
    # proposals and evaluation
    proposal_scales: tuple = (18.0, 24.0, 30.0)
    proposal_ratios: tuple = (1.0,)
    proposal_stride: int = 4
    nms_thresh: float = 0.3
    eval_flip: bool = False
    # data: a dataset directory, or in-process synthesis when empty
    data: str = ""
    n_scenes: int = 200
    scene_seed: int = 7
    classes: int = 4
    height: int = 64
    width: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0 or self.lr_final <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.decay_at < self.iterations:
            raise ConfigError("decay_at must lie before the final iteration")
        if self.batch_size < 1 or self.K < 1:
            raise ConfigError("batch_size and K must be at least 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.softmax_reading not in ("wsddn", "literal"):
            raise ConfigError("softmax_reading must be 'wsddn' or 'literal'")
        try:
            self.cadm_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def cadm_config(self) -> Optional[CadmConfig]:
        cfg = CadmConfig(self.lambda1, self.lambda2, self.drop_rate, self.cadm_dims,
                         self.spatial_max_scope)
        return cfg if self.cadm else None

    def lr_at(self, iteration: int) -> float:
        return self.lr if iteration < self.decay_at else self.lr_final

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def is_tuple_key(key: str) -> bool:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return isinstance(_FIELDS[key].default, tuple)


def parse_value(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            return _bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return _ints(text) if key == "stage_channels" else _floats(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text.strip()!r}") from exc
    return text.strip()


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_pairs(text: str) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def parse_config(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    base = base or TrainConfig()
    changes = {k: parse_value(k, v) for k, v in parse_pairs(text).items()}
    try:
        return base.replace(**changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{name}={format_value(getattr(cfg, name))}\n" for name in _FIELDS)
