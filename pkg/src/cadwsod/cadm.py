"""Cascade attentive dropout: channel dropout followed by a stochastic choice
between spatial dropout (punish discriminative pixels) and an importance map
(reward them).

Masks are built from forward values and enter the graph as constants. The
importance map is a smooth function of the input and is differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

DIMS = ("channel", "spatial", "cascade")
SCOPES = ("row", "map")


@dataclass
class CadmConfig:
    lambda1: float = 0.8
    lambda2: float = 0.8
    drop_rate: float = 0.8
    # ablation: which dropout dimensions are active
    dims: str = "cascade"
    # scope of the maximum g_max used by the spatial threshold
    spatial_max_scope: str = "row"

    def __post_init__(self):
        if not 0 < self.lambda1 <= 1 or not 0 < self.lambda2 <= 1:
            raise ValueError("lambda1 and lambda2 must lie in (0, 1]")
        if not 0 <= self.drop_rate <= 1:
            raise ValueError("drop_rate must lie in [0, 1]")
        if self.dims not in DIMS:
            raise ValueError(f"dims must be one of {DIMS}")
        if self.spatial_max_scope not in SCOPES:
            raise ValueError(f"spatial_max_scope must be one of {SCOPES}")


@dataclass
class DropDecision:
    channel_mask: np.ndarray      # N×D×1×1, {0,1}
    spatial_mask: np.ndarray      # N×1×H×W, {0,1}
    importance_map: np.ndarray    # N×1×H×W, (0,1)
    alpha: float
    branch_taken: str             # "drop" | "importance"

    def to_record(self) -> dict:
        """Compact summary for the training log."""
        return {
            "alpha": self.alpha,
            "branch": self.branch_taken,
            "channels_dropped": int((self.channel_mask == 0).sum()),
            "pixels_dropped": int((self.spatial_mask == 0).sum()),
        }


def channel_confidence(x) -> Tensor:
    """Global average pooling: N×D×H×W -> N×D."""
    return T.reduce(x, (2, 3), "mean")


def channel_drop_mask(f, lambda1: float) -> np.ndarray:
    f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    fmax = f.max(axis=1, keepdims=True)
    mask = np.where(f > fmax * lambda1, 0.0, 1.0)
    return mask.reshape(f.shape[0], f.shape[1], 1, 1)


def apply_channel_mask(x, m_cd: np.ndarray) -> Tensor:
    x = T.as_tensor(x)
    n, d = x.shape[:2]
    if m_cd.shape != (n, d, 1, 1):
        raise T.ShapeError(f"channel mask shape {m_cd.shape} does not match input {x.shape}")
    return T.mul(x, Tensor(m_cd))


def self_attention_map(x_cd) -> Tensor:
    """Channel-wise average pooling: N×D×H×W -> N×1×H×W."""
    return T.reduce(x_cd, (1,), "mean", keepdims=True)


def spatial_drop_mask(x_a, lambda2: float, scope: str = "row") -> np.ndarray:
    """Drop every pixel exceeding ``lambda2`` times the maximum of its row
    (``scope="row"``) or of the whole map (``scope="map"``)."""
    a = np.asarray(x_a.data if isinstance(x_a, Tensor) else x_a, dtype=np.float64)
    if scope == "row":
        gmax = a.max(axis=3, keepdims=True)
    elif scope == "map":
        gmax = a.max(axis=(2, 3), keepdims=True)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return np.where(a > gmax * lambda2, 0.0, 1.0)


def importance_map(x_a) -> Tensor:
    return T.sigmoid(x_a)


def branch_for(alpha: float, drop_rate: float) -> str:
    return "drop" if alpha + drop_rate > 1 else "importance"


def cadm_forward(x, cfg: CadmConfig, mode: str = "train",
                 rng: Optional[np.random.Generator] = None,
                 decision: Optional[DropDecision] = None):
    """Return ``(X3*, DropDecision)``.

    In eval mode the module is bypassed and the decision is ``None``. Passing
    ``decision`` replays a recorded draw with its masks frozen, which is what
    gradient checks need.
    """
    x = T.as_tensor(x)
    if mode == "eval":
        return x, None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if decision is None and rng is None:
        raise ValueError("train mode needs an rng")

    n, d, h, w = x.shape
    if cfg.dims == "spatial":
        m_cd = np.ones((n, d, 1, 1))
    else:
        m_cd = (decision.channel_mask if decision is not None
                else channel_drop_mask(channel_confidence(x), cfg.lambda1))
    x_cd = apply_channel_mask(x, m_cd)
    if cfg.dims == "channel":
        ones = np.ones((n, 1, h, w))
        dec = DropDecision(m_cd, ones, ones * 0.5, float("nan"), "channel_only")
        return x_cd, dec

    x_a = self_attention_map(x_cd)
    m_imp = importance_map(x_a)
    if decision is not None:
        m_sd, alpha = decision.spatial_mask, decision.alpha
        branch = decision.branch_taken
    else:
        m_sd = spatial_drop_mask(x_a, cfg.lambda2, cfg.spatial_max_scope)
        alpha = float(rng.random())
        branch = branch_for(alpha, cfg.drop_rate)
    dec = DropDecision(m_cd, m_sd, m_imp.data.copy(), alpha, branch)
    if branch == "drop":
        return T.mul(x_cd, Tensor(m_sd)), dec
    return T.mul(x_cd, m_imp), dec
