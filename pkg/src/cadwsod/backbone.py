"""Three-stage conv/relu/pool trunk with the CADM and GCM insertion points."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .cadm import CadmConfig, DropDecision, cadm_forward
from .gcm import GcmParams, gcm_forward, he_normal
from .tensor import Tensor


@dataclass
class BackboneConfig:
    stage_channels: list = field(default_factory=lambda: [8, 16, 32])
    conv_kernel: int = 3
    in_channels: int = 3

    def __post_init__(self):
        if len(self.stage_channels) != 3:
            raise ValueError("backbone has exactly three stages")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    # feature map stride relative to the image
    stride = 4


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> dict:
    params = {}
    c_in, k = cfg.in_channels, cfg.conv_kernel
    for s, c_out in enumerate(cfg.stage_channels, start=1):
        w = he_normal(rng, (c_out, c_in, k, k), c_in * k * k)
        params[f"conv{s}.weight"] = Tensor(w, True)
        params[f"conv{s}.bias"] = Tensor(np.zeros((1, c_out, 1, 1)), True)
        c_in = c_out
    return params


def _stage(x, params, s, cfg, pool):
    y = T.conv2d(x, params[f"conv{s}.weight"], stride=1, pad=(cfg.conv_kernel - 1) // 2)
    y = T.relu(T.add(y, params[f"conv{s}.bias"]))
    return T.max_pool2d(y, 2) if pool else y


def backbone_forward(image, cfg: BackboneConfig, params: dict,
                     cadm: Optional[CadmConfig] = None, gcm: Optional[GcmParams] = None,
                     mode: str = "train", rng: Optional[np.random.Generator] = None,
                     decision: Optional[DropDecision] = None):
    """Image batch N×3×H×W -> (X5* of shape N×C×H/4×W/4, DropDecision or None)."""
    image = T.as_tensor(image)
    if image.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"expected N×{cfg.in_channels}×H×W input, got {image.shape}")
    h, w = image.shape[2:]
    if h % 4 or w % 4:
        raise T.ShapeError(f"image size {h}×{w} must be divisible by 4")

    x = _stage(image, params, 1, cfg, pool=True)
    x3 = _stage(x, params, 2, cfg, pool=True)
    dec = None
    if cadm is not None:
        x3, dec = cadm_forward(x3, cadm, mode=mode, rng=rng, decision=decision)
    x5 = _stage(x3, params, 3, cfg, pool=False)
    if gcm is not None:
        x5 = gcm_forward(x5, gcm)
    return x5, dec
