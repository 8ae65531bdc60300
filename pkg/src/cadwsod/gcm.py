"""Global context module: softmax attention pooling, a sigmoid bottleneck with
layer normalization, and fusion back into the input map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

FUSION_MODES = ("multiplication", "addition", "multiplication_then_addition")


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Zero-mean normal with variance ``2 / fan_in``, suited to relu layers."""
    return rng.normal(size=shape) * np.sqrt(2.0 / fan_in)


@dataclass
class GcmParams:
    """Weights of one context block.

    ``w1`` is a 1×D×1×1 conv kernel producing attention logits. ``w2``
    (D×D/r) and ``w3`` (D/r×D) act on the pooled context vector, where a 1×1
    conv reduces to a matrix product.
    """

    w1: Tensor
    w2: Tensor
    w3: Tensor
    bottleneck_ratio: int = 4
    ln_eps: float = 1e-5
    fusion_mode: str = "multiplication_then_addition"

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, bottleneck_ratio: int = 4,
             ln_eps: float = 1e-5, fusion_mode: str = "multiplication_then_addition",
             zero_w3: bool = True) -> "GcmParams":
        if bottleneck_ratio < 1 or channels % bottleneck_ratio:
            raise ValueError(f"channels {channels} not divisible by ratio {bottleneck_ratio}")
        mid = channels // bottleneck_ratio
        w1 = glorot(rng, (1, channels, 1, 1), channels, 1)
        w2 = glorot(rng, (channels, mid), channels, mid)
        w3 = np.zeros((mid, channels)) if zero_w3 else glorot(rng, (mid, channels), mid, channels)
        return cls(Tensor(w1, True), Tensor(w2, True), Tensor(w3, True),
                   bottleneck_ratio, ln_eps, fusion_mode)

    def tensors(self) -> dict:
        return {"w1": self.w1, "w2": self.w2, "w3": self.w3}


def global_attention_pool(x, w1) -> Tensor:
    """Context vector per sample: attention-weighted sum over positions (N×D)."""
    x = T.as_tensor(x)
    n, d, h, w = x.shape
    logits = T.conv2d(x, w1, stride=1, pad=0)                   # N×1×H×W
    attn = T.softmax_axis(T.reshape(logits, (n, h * w)), axis=1)
    weighted = T.mul(x, T.reshape(attn, (n, 1, h, w)))
    return T.reduce(weighted, (2, 3), "sum")


def bottleneck_transform(beta, params: GcmParams) -> Tensor:
    beta = T.as_tensor(beta)
    d = beta.shape[1]
    if d % params.bottleneck_ratio:
        raise ValueError(f"channels {d} not divisible by ratio {params.bottleneck_ratio}")
    z = T.matmul(beta, params.w2)
    z = T.relu(T.layer_norm(z, normalized_extent=-1, eps=params.ln_eps))
    return T.sigmoid(T.matmul(z, params.w3))


def fuse(x, delta, mode: str) -> Tensor:
    x = T.as_tensor(x)
    n, d = x.shape[:2]
    dl = T.reshape(delta, (n, d, 1, 1))
    if mode == "multiplication_then_addition":
        return T.add(x, T.mul(x, dl))
    if mode == "multiplication":
        return T.mul(x, dl)
    if mode == "addition":
        return T.add(x, dl)
    raise ValueError(f"unknown fusion mode {mode!r}")


def gcm_forward(x, params: GcmParams) -> Tensor:
    beta = global_attention_pool(x, params.w1)
    delta = bottleneck_transform(beta, params)
    return fuse(x, delta, params.fusion_mode)
