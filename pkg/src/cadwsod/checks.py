"""Finite-difference gradient checks for CADM, GCM and the detection head.

Each check builds a scalar ``<random weights, module output>`` so that every
output element contributes, freezes the non-differentiable choices (masks,
branch, pseudo labels) and samples input coordinates.
"""

from __future__ import annotations

import numpy as np

from . import cadm as C
from . import gcm as G
from . import head as H
from . import tensor as T
from .gradcheck import GradCheckReport, grad_check
from .tensor import Tensor

MODULES = ("cadm", "gcm", "head")


def _probe(out: Tensor, up: np.ndarray) -> Tensor:
    return T.reduce(T.mul(out, Tensor(up)), tuple(range(out.ndim)))


def cadm_reports(n_coords: int = 250, seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(2, 8, 6, 6))
    up = rng.normal(size=x0.shape)
    reports = {}
    for branch, rate in (("drop", 1.0), ("importance", 0.0)):
        cfg = C.CadmConfig(drop_rate=rate)
        _, dec = C.cadm_forward(Tensor(x0), cfg, "train", np.random.default_rng(seed + 1))
        if dec.branch_taken != branch:
            raise RuntimeError(f"expected the {branch} branch, drew {dec.branch_taken}")

        def f(x, cfg=cfg, dec=dec):
            return _probe(C.cadm_forward(x, cfg, "train", decision=dec)[0], up)

        reports[f"cadm/{branch}"] = grad_check(f, x0, n_samples=n_coords, seed=seed)
    return reports


def gcm_reports(n_coords: int = 250, seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(2, 8, 5, 5))
    up = rng.normal(size=x0.shape)
    reports = {}
    for mode in G.FUSION_MODES:
        # non-zero W3 so the context path carries gradient
        p = G.GcmParams.init(8, np.random.default_rng(seed + 1), 4, 1e-5, mode, zero_w3=False)
        reports[f"gcm/{mode}"] = grad_check(lambda x, p=p: _probe(G.gcm_forward(x, p), up),
                                            x0, n_samples=n_coords, seed=seed)
    return reports


def head_reports(n_coords: int = 250, seed: int = 0, refinements: int = 3) -> dict[str, GradCheckReport]:
    """Feature map -> RoI pooling -> fc -> WSDDN, refinement and distillation losses.

    Gradients are probed with respect to the feature map and the fc weights.
    """
    rng = np.random.default_rng(seed)
    d, h, w, c, hidden, p = 6, 8, 8, 3, 10, 2
    x0 = rng.normal(size=(1, d, h, w))
    boxes = np.array([[0, 0, 16, 16], [4, 4, 20, 24], [8, 0, 32, 12], [16, 16, 32, 32],
                      [0, 12, 20, 32], [10, 10, 26, 26], [2, 20, 14, 32], [18, 2, 30, 30]], float)
    y = np.array([1.0, 0.0, 1.0])

    def lin(n_in, n_out):
        return (Tensor(rng.normal(size=(n_in, n_out)) * 0.5), Tensor(rng.normal(size=(1, n_out)) * 0.1))

    fc6, det, cls_ = lin(d * p * p, hidden), lin(hidden, c), lin(hidden, c)
    refs = [lin(hidden, c + 1) for _ in range(refinements)]
    dis = lin(hidden, c + 1)

    def build(x, frozen=None, w6=fc6[0]):
        pooled = T.reshape(H.roi_pool(x, boxes, 0.25, p), (len(boxes), -1))
        feats = T.relu(T.add(T.matmul(pooled, w6), fc6[1]))
        s = H.wsddn_head(feats, det, cls_)
        outs = [H.refinement_head(feats, fw) for fw in refs]
        dist = H.refinement_head(feats, dis)
        if frozen is None:
            frozen, prev = [], s.x_r.data
            for o in outs:
                frozen.append(H.mine_pseudo_labels(prev, boxes, y))
                prev = o.data[:, 1:]
            frozen.append(H.mine_pseudo_labels(H.distillation_targets(outs)[:, 1:], boxes, y))
        l_ref = [H.refinement_loss(o, pl) for o, pl in zip(outs, frozen)]
        total = H.total_loss(H.mil_loss(s.phi, y), H.refinement_loss(dist, frozen[-1]), l_ref)
        return total, frozen

    with T.no_graph():
        _, frozen = build(Tensor(x0))
    rep = grad_check(lambda x: build(x, frozen)[0], x0, n_samples=n_coords, seed=seed)
    # max pooling routes gradient to few cells, so also probe the dense fc weights
    rep_w = grad_check(lambda wt: build(Tensor(x0), frozen, wt)[0], fc6[0].data,
                       n_samples=n_coords, seed=seed)
    return {"head/features": rep, "head/fc6": rep_w}


def run_checks(module: str = "all", n_coords: int = 250, seed: int = 0) -> dict[str, GradCheckReport]:
    if module not in MODULES + ("all",):
        raise ValueError(f"module must be one of {MODULES + ('all',)}")
    chosen = MODULES if module == "all" else (module,)
    fns = {"cadm": cadm_reports, "gcm": gcm_reports, "head": head_reports}
    out = {}
    for m in chosen:
        out.update(fns[m](n_coords, seed))
    return out
