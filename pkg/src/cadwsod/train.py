"""Training loop (SGD with momentum and weight decay) and evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import TrainConfig, format_config, parse_config
from .data import SyntheticScene, generate_scenes, grid_proposals, ground_truths, load_dataset
from .metrics import Box, Detection, evaluate_detections, nms_indices
from .model import Detector

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message if dump_path is None else f"{message}; batch dumped to {dump_path}")
        self.dump_path = dump_path


def make_dataset(cfg: TrainConfig) -> list[SyntheticScene]:
    if cfg.data:
        return load_dataset(cfg.data)
    return generate_scenes(cfg.n_scenes, cfg.scene_seed, cfg.classes, cfg.height, cfg.width)


def proposals_for(cfg: TrainConfig, height: int, width: int) -> np.ndarray:
    return grid_proposals(height, width, cfg.proposal_scales, cfg.proposal_ratios,
                          cfg.proposal_stride)


def sgd_step(params: dict, velocity: dict, lr: float, momentum: float, weight_decay: float) -> None:
    """v <- momentum·v - lr·(g + wd·θ);  θ <- θ + v."""
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = momentum * velocity[name] - lr * (g + weight_decay * p.data)
        velocity[name] = v
        p.data = p.data + v
        p.grad = None


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


@dataclass
class TrainResult:
    model: Detector
    velocity: dict
    rng: np.random.Generator
    iteration: int
    records: list = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        tensors = {name: p.data for name, p in self.model.params.items()}
        tensors.update({f"velocity/{k}": v for k, v in self.velocity.items()})
        state = {"iteration": self.iteration, "rng": rng_state(self.rng)}
        return Checkpoint(tensors, format_config(self.model.cfg), state)


def model_from_checkpoint(ckpt: Checkpoint) -> Detector:
    cfg = parse_config(ckpt.config)
    model = Detector(cfg, np.random.default_rng(0))
    model.load_state(ckpt.tensors)
    return model


def _dump_batch(dump_dir, it, images, labels, idx, rng_before) -> Optional[str]:
    if dump_dir is None:
        return None
    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, f"nonfinite_iter{it}.npz")
    np.savez(path, images=images, labels=labels, indices=idx,
             rng_state=json.dumps(rng_before))
    return path


def train(cfg: TrainConfig, scenes: Sequence[SyntheticScene],
          resume: Optional[Checkpoint] = None, until: Optional[int] = None,
          log_file=None, dump_dir: Optional[str] = None) -> TrainResult:
    """Run iterations ``[start, until)`` where ``until`` defaults to ``cfg.iterations``.

    Every iteration appends one record to the result (and, when given, one
    JSON line to ``log_file``).
    """
    if not scenes:
        raise ValueError("no training scenes")
    if any(sc.image_labels.sum() == 0 for sc in scenes):
        raise ValueError("every training scene needs at least one positive label")
    if resume is None:
        rng = np.random.default_rng(cfg.seed)
        model = Detector(cfg, rng)
        velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        start = 0
    else:
        model = model_from_checkpoint(resume)
        cfg = model.cfg
        velocity = {k: resume.tensors[f"velocity/{k}"].copy() for k in model.params}
        rng = restore_rng(resume.state["rng"])
        start = int(resume.state["iteration"])
    until = cfg.iterations if until is None else until

    images_all = np.stack([sc.image for sc in scenes])
    labels_all = np.stack([sc.image_labels for sc in scenes])
    h, w = images_all.shape[2:]
    boxes = proposals_for(cfg, h, w)
    n = len(scenes)
    bs = min(cfg.batch_size, n)
    result = TrainResult(model, velocity, rng, start)

    for it in range(start, until):
        rng_before = rng_state(rng)
        idx = rng.choice(n, size=bs, replace=False)
        images = images_all[idx]
        if cfg.flip_augment:
            flip = rng.random(bs) < 0.5
            images = np.where(flip[:, None, None, None], images[..., ::-1], images)
        labels = labels_all[idx]
        try:
            with T.Graph() as graph:
                loss, outs, dec = model.forward_train(images, [boxes] * bs, labels, rng)
                total = loss.item()
                if not math.isfinite(total):
                    raise T.NonFiniteError("non-finite loss")
                graph.backward(loss)
        except T.NonFiniteError as exc:
            path = _dump_batch(dump_dir, it, images, labels, idx, rng_before)
            raise NumericFailure(f"iteration {it}: {exc}", path) from None

        sgd_step(model.params, velocity, cfg.lr_at(it), cfg.momentum, cfg.weight_decay)
        rec = {
            "iter": it,
            "L_cls": float(np.mean([o.l_cls.item() for o in outs])),
            "L_ref": [float(np.mean([o.l_ref[k].item() for o in outs])) for k in range(cfg.K)],
            "L_dis": float(np.mean([o.l_dis.item() for o in outs])),
            "total": total,
            "branch_taken": dec.branch_taken if dec is not None else None,
            "lr": cfg.lr_at(it),
        }
        result.records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
        if it % 100 == 0 or it == until - 1:
            log.info("iter %d total %.4f cls %.4f", it, total, rec["L_cls"])
        result.iteration = it + 1
    return result


@dataclass
class EvalResult:
    classes: list            # ClassMetrics per class
    mAP: float
    corloc: float
    detections: list = field(default_factory=list)

    def records(self) -> list[dict]:
        rows = [{"class_id": r.class_id, "ap": r.ap, "corloc": r.corloc, "no_gt": r.no_gt}
                for r in self.classes]
        rows.append({"mAP": self.mAP, "mean_corloc": self.corloc})
        return rows


def detect(model: Detector, scenes: Sequence[SyntheticScene], chunk: int = 16):
    """Post-NMS detections and per-image best detection for every class."""
    cfg = model.cfg
    dets, tops = [], []
    h, w = scenes[0].image.shape[1:]
    boxes = proposals_for(cfg, h, w)
    for s in range(0, len(scenes), chunk):
        part = scenes[s:s + chunk]
        images = np.stack([sc.image for sc in part])
        scores = model.predict(images, [boxes] * len(part))
        for j, sc_scores in enumerate(scores):
            img = s + j
            for c in range(sc_scores.shape[1]):
                col = sc_scores[:, c]
                kept = nms_indices(boxes, col, cfg.nms_thresh)
                for r in kept:
                    dets.append(Detection(img, c, float(col[r]), Box(*boxes[r])))
                tops.append(Detection(img, c, float(col[kept[0]]), Box(*boxes[kept[0]])))
    return dets, tops


def evaluate(model: Detector, scenes: Sequence[SyntheticScene]) -> EvalResult:
    dets, tops = detect(model, scenes)
    rows, mean_ap, mean_cl = evaluate_detections(dets, tops, ground_truths(scenes),
                                                 model.cfg.classes)
    return EvalResult(rows, mean_ap, mean_cl, dets)
