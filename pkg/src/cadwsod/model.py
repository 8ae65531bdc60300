"""The full detector: backbone with CADM/GCM, RoI pooling and the MIL head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import head as H
from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .cadm import DropDecision
from .config import TrainConfig
from .gcm import GcmParams, he_normal
from .tensor import Tensor


@dataclass
class ImageOutput:
    scores: H.ScoreTensors
    pseudo_labels: list = field(default_factory=list)   # K refinement sets, then distill
    l_cls: Optional[Tensor] = None
    l_ref: list = field(default_factory=list)
    l_dis: Optional[Tensor] = None
    total: Optional[Tensor] = None


class Detector:
    """Parameters plus forward passes for training and inference."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.backbone_cfg = BackboneConfig(stage_channels=list(cfg.stage_channels))
        self.cadm_cfg = cfg.cadm_config()
        self.params: dict[str, Tensor] = {}
        for k, v in init_backbone(self.backbone_cfg, rng).items():
            self.params[f"backbone.{k}"] = v
        d = self.backbone_cfg.out_channels
        self.gcm: Optional[GcmParams] = None
        if cfg.gcm:
            self.gcm = GcmParams.init(d, rng, cfg.bottleneck_ratio, cfg.ln_eps, cfg.fusion_mode)
            for k, v in self.gcm.tensors().items():
                self.params[f"gcm.{k}"] = v
        feat = d * cfg.roi_size * cfg.roi_size
        c = cfg.classes
        self._fc("fc6", feat, cfg.hidden, rng)
        self._fc("det", cfg.hidden, c, rng)
        self._fc("cls", cfg.hidden, c, rng)
        for k in range(1, cfg.K + 1):
            self._fc(f"ref{k}", cfg.hidden, c + 1, rng)
        self._fc("dis", cfg.hidden, c + 1, rng)

    def _fc(self, name: str, n_in: int, n_out: int, rng) -> None:
        self.params[f"{name}.weight"] = Tensor(he_normal(rng, (n_in, n_out), n_in), True)
        self.params[f"{name}.bias"] = Tensor(np.zeros((1, n_out)), True)

    def fc(self, name: str) -> tuple:
        return self.params[f"{name}.weight"], self.params[f"{name}.bias"]

    def load_state(self, tensors: dict) -> None:
        for name, t in self.params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint lacks tensor {name!r}")
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {t.shape}")
            t.data = arr.copy()

    def features(self, images, mode: str, rng=None, decision: Optional[DropDecision] = None):
        bb = {k[len("backbone."):]: v for k, v in self.params.items() if k.startswith("backbone.")}
        return backbone_forward(images, self.backbone_cfg, bb, cadm=self.cadm_cfg, gcm=self.gcm,
                                mode=mode, rng=rng, decision=decision)

    def proposal_features(self, x5, index: int, boxes: np.ndarray) -> Tensor:
        pooled = H.roi_pool(x5, boxes, 1.0 / self.backbone_cfg.stride, self.cfg.roi_size,
                            image_index=index)
        flat = T.reshape(pooled, (pooled.shape[0], -1))
        w, b = self.fc("fc6")
        return T.relu(T.add(T.matmul(flat, w), b))

    def image_scores(self, feats) -> H.ScoreTensors:
        scores = H.wsddn_head(feats, self.fc("det"), self.fc("cls"), self.cfg.softmax_reading)
        scores.refinement_scores = [H.refinement_head(feats, self.fc(f"ref{k}"))
                                    for k in range(1, self.cfg.K + 1)]
        scores.distill_scores = H.refinement_head(feats, self.fc("dis"))
        return scores

    def image_losses(self, scores: H.ScoreTensors, boxes: np.ndarray, labels) -> ImageOutput:
        out = ImageOutput(scores)
        iou = self.cfg.iou_assign
        out.l_cls = H.mil_loss(scores.phi, labels)
        prev = scores.x_r.data
        for s_k in scores.refinement_scores:
            pl = H.mine_pseudo_labels(prev, boxes, labels, iou)
            out.pseudo_labels.append(pl)
            out.l_ref.append(H.refinement_loss(s_k, pl))
            prev = s_k.data[:, 1:]
        target = H.distillation_targets(scores.refinement_scores)
        pl = H.mine_pseudo_labels(target[:, 1:], boxes, labels, iou)
        out.pseudo_labels.append(pl)
        out.l_dis = H.refinement_loss(scores.distill_scores, pl)
        out.total = H.total_loss(out.l_cls, out.l_dis, out.l_ref)
        return out

    def forward_train(self, images, proposals: Sequence[np.ndarray], labels: np.ndarray,
                      rng: np.random.Generator, decision: Optional[DropDecision] = None):
        """Batch loss (mean of per-image totals), per-image outputs and the CADM draw."""
        x5, dec = self.features(images, "train", rng, decision)
        outs = []
        for i, boxes in enumerate(proposals):
            feats = self.proposal_features(x5, i, boxes)
            outs.append(self.image_losses(self.image_scores(feats), boxes, labels[i]))
        loss = outs[0].total
        for o in outs[1:]:
            loss = T.add(loss, o.total)
        loss = T.mul(loss, Tensor(1.0 / len(outs)))
        return loss, outs, dec

    def predict(self, images, proposals: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Eval-mode detection scores (R×C per image).

        With ``eval_flip`` the scores are averaged with those of the mirrored
        image at the mirrored boxes.
        """
        images = np.asarray(images)
        res = self._predict_once(images, proposals)
        if self.cfg.eval_flip:
            w = images.shape[3]
            mirrored = [np.stack([w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]], axis=1)
                        for b in proposals]
            flipped = self._predict_once(images[..., ::-1], mirrored)
            res = [(a + b) / 2.0 for a, b in zip(res, flipped)]
        return res

    def _predict_once(self, images, proposals):
        with T.no_graph():
            x5, _ = self.features(images, "eval")
            res = []
            for i, boxes in enumerate(proposals):
                s = self.image_scores(self.proposal_features(x5, i, boxes))
                res.append(H.inference_scores(s.refinement_scores, s.distill_scores,
                                              self.cfg.include_distill))
        return res
