"""RoI max pooling and the MIL / refinement / distillation head.

Shapes: R proposals, C foreground classes. Refinement and distillation
scores have C+1 columns with background in column 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .metrics import pairwise_iou
from .tensor import Tensor

PROB_EPS = 1e-10

_plan_cache: dict = {}


def _bin_edges(start: int, length: int, p: int) -> list[tuple[int, int]]:
    return [(start + (i * length) // p, start + -((-(i + 1) * length) // p)) for i in range(p)]


def _roi_plan(boxes: np.ndarray, h: int, w: int, scale: float, p: int) -> np.ndarray:
    key = (boxes.tobytes(), h, w, scale, p)
    plan = _plan_cache.get(key)
    if plan is not None:
        return plan
    pad = h * w
    cells = []
    for x1, y1, x2, y2 in boxes:
        xs, xe = int(math.floor(x1 * scale)), int(math.ceil(x2 * scale))
        ys, ye = int(math.floor(y1 * scale)), int(math.ceil(y2 * scale))
        xs, xe = min(max(xs, 0), w), min(max(xe, 0), w)
        ys, ye = min(max(ys, 0), h), min(max(ye, 0), h)
        if xe <= xs:
            xs = min(xs, w - 1)
            xe = xs + 1
        if ye <= ys:
            ys = min(ys, h - 1)
            ye = ys + 1
        row = []
        for by0, by1 in _bin_edges(ys, ye - ys, p):
            for bx0, bx1 in _bin_edges(xs, xe - xs, p):
                row.append([yy * w + xx for yy in range(by0, by1) for xx in range(bx0, bx1)])
        cells.append(row)
    longest = max(len(b) for row in cells for b in row)
    plan = np.full((len(boxes), p * p, max(longest, 1)), pad, dtype=np.int64)
    for r, row in enumerate(cells):
        for b, idx in enumerate(row):
            plan[r, b, :len(idx)] = idx
    if len(_plan_cache) > 64:
        _plan_cache.clear()
    _plan_cache[key] = plan
    return plan


def roi_pool(features, boxes, spatial_scale: float = 0.25, out: int = 2,
             image_index: int = 0) -> Tensor:
    """Max-pool each box into an ``out``×``out`` grid: N×D×h×w -> R×D×P×P.

    Boxes are in image coordinates and refer to image ``image_index`` of the
    batch. Bin maxima tie-break to the lowest row-major cell.
    """
    features = T.as_tensor(features)
    if features.ndim != 4:
        raise T.ShapeError(f"roi_pool takes an N×D×h×w map, got {features.shape}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n, d, h, w = features.shape
    plan = _roi_plan(boxes, h, w, spatial_scale, out)
    r, pp, _ = plan.shape
    fmap = features.data[image_index].reshape(d, h * w)
    flat = np.concatenate([fmap, np.full((d, 1), -np.inf)], axis=1)
    gathered = flat[:, plan]                                    # D×R×PP×L
    arg = gathered.argmax(axis=-1)
    vals = np.take_along_axis(gathered, arg[..., None], axis=-1)[..., 0]
    empty = np.isneginf(vals)
    vals[empty] = 0.0
    pos = np.take_along_axis(np.broadcast_to(plan, (d,) + plan.shape), arg[..., None], -1)[..., 0]
    result = vals.transpose(1, 0, 2).reshape(r, d, out, out)
    stride = h * w + 1

    def bw(g):
        g = np.where(empty, 0.0, g.reshape(r, d, pp).transpose(1, 0, 2))
        offs = pos + (np.arange(d) * stride)[:, None, None]
        acc = np.bincount(offs.ravel(), weights=g.ravel(), minlength=d * stride)
        full = np.zeros((n, d, h, w))
        full[image_index] = acc.reshape(d, stride)[:, :h * w].reshape(d, h, w)
        return (full,)

    return T.record("roi_pool", (features,), result, bw, out=out, scale=spatial_scale)


@dataclass
class ScoreTensors:
    x_det: Tensor
    x_cls: Tensor
    sigma_det: Tensor
    sigma_cls: Tensor
    x_r: Tensor
    phi: Tensor
    refinement_scores: list
    distill_scores: Optional[Tensor] = None


def wsddn_head(feats, fc_det, fc_cls, softmax_reading: str = "wsddn") -> ScoreTensors:
    """Two-stream MIL scores from R×F proposal features.

    ``fc_det`` and ``fc_cls`` are ``(weight F×C, bias 1×C)`` pairs. With the
    default reading the detection stream is normalized over proposals and the
    classification stream over classes; ``"literal"`` swaps the two.
    """
    feats = T.as_tensor(feats)
    if feats.shape[0] < 1:
        raise T.ShapeError("need at least one proposal")
    x_det = T.add(T.matmul(feats, fc_det[0]), fc_det[1])
    x_cls = T.add(T.matmul(feats, fc_cls[0]), fc_cls[1])
    if softmax_reading == "wsddn":
        det_axis, cls_axis = 0, 1
    elif softmax_reading == "literal":
        det_axis, cls_axis = 1, 0
    else:
        raise ValueError(f"unknown softmax reading {softmax_reading!r}")
    s_det = T.softmax_axis(x_det, det_axis)
    s_cls = T.softmax_axis(x_cls, cls_axis)
    x_r = T.mul(s_det, s_cls)
    # mathematically within [0, 1]; the clamp only absorbs a last-ulp overshoot
    phi = T.clamp(T.reduce(x_r, (0,), "sum"), 0.0, 1.0)
    return ScoreTensors(x_det, x_cls, s_det, s_cls, x_r, phi, [])


def refinement_head(feats, fc) -> Tensor:
    """One instance classifier: FC + softmax over C+1 classes."""
    return T.softmax_axis(T.add(T.matmul(T.as_tensor(feats), fc[0]), fc[1]), 1)


def mil_loss(phi, y) -> Tensor:
    """Multi-label binary cross-entropy on image scores."""
    y = np.asarray(y, dtype=np.float64)
    p = T.clamp(phi, PROB_EPS, 1 - PROB_EPS)
    pos = T.mul(T.log(p), Tensor(y))
    negs = T.mul(T.log(T.sub(Tensor(np.ones_like(y)), p)), Tensor(1.0 - y))
    return T.neg(T.reduce(T.add(pos, negs), (0,), "sum"))


@dataclass
class PseudoLabelSet:
    labels: np.ndarray      # R ints, 0 = background, c+1 = class c
    weights: np.ndarray     # R floats
    seeds: dict             # class c -> seed proposal index

    def onehot(self, num_classes: int) -> np.ndarray:
        y = np.zeros((len(self.labels), num_classes + 1))
        y[np.arange(len(self.labels)), self.labels] = 1.0
        return y


def mine_pseudo_labels(prev_scores, boxes, image_labels, iou_assign: float = 0.5) -> PseudoLabelSet:
    """Label proposals from the previous classifier's foreground scores (R×C).

    Each present class seeds at its top-scoring proposal (ties: lowest
    index). A proposal takes the class of its highest-IoU seed (ties: first
    seed in class order) when that IoU reaches ``iou_assign``, background
    otherwise; its weight is that seed's score either way.
    """
    scores = np.asarray(prev_scores, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    present = np.flatnonzero(np.asarray(image_labels) > 0)
    if present.size == 0:
        raise ValueError("at least one image label must be positive")
    seed_idx = np.array([int(np.argmax(scores[:, c])) for c in present])
    seed_score = scores[seed_idx, present]
    ov = pairwise_iou(boxes, boxes[seed_idx])                   # R×S
    best = ov.argmax(axis=1)
    best_ov = ov[np.arange(len(boxes)), best]
    labels = np.where(best_ov >= iou_assign, present[best] + 1, 0)
    weights = seed_score[best]
    return PseudoLabelSet(labels.astype(np.int64), weights,
                          {int(c): int(s) for c, s in zip(present, seed_idx)})


def refinement_loss(scores_k, labels: PseudoLabelSet) -> Tensor:
    scores_k = T.as_tensor(scores_k)
    r, c1 = scores_k.shape
    target = labels.onehot(c1 - 1) * labels.weights[:, None] / r
    logp = T.log(T.clamp(scores_k, PROB_EPS, 1.0))
    return T.neg(T.reduce(T.mul(logp, Tensor(target)), (0, 1), "sum"))


def distillation_targets(refinement_scores: Sequence) -> np.ndarray:
    mats = [np.asarray(s.data if isinstance(s, Tensor) else s) for s in refinement_scores]
    if not mats:
        raise ValueError("need at least one refinement branch")
    return np.mean(mats, axis=0)


def total_loss(l_cls, l_dis, l_refs: Sequence) -> Tensor:
    total = T.add(l_cls, l_dis)
    for l in l_refs:
        total = T.add(total, l)
    return total


def inference_scores(refinement_scores: Sequence, distill_scores=None,
                     include_distill: bool = True) -> np.ndarray:
    """Mean of the refinement (and optionally distillation) heads, background dropped."""
    mats = [np.asarray(s.data if isinstance(s, Tensor) else s) for s in refinement_scores]
    if include_distill and distill_scores is not None:
        d = distill_scores
        mats.append(np.asarray(d.data if isinstance(d, Tensor) else d))
    if not mats:
        raise ValueError("no score matrices given")
    return np.mean(mats, axis=0)[:, 1:]
