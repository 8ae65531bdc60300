import io
import json

import numpy as np
import pytest

from cadwsod import tensor as T
from cadwsod.checkpoint import from_bytes, to_bytes
from cadwsod.config import ConfigError, TrainConfig, format_config, load_config, parse_config
from cadwsod.data import generate_scenes, ground_truths
from cadwsod.metrics import Detection, evaluate_detections
from cadwsod.model import Detector
from cadwsod.tensor import Tensor
from cadwsod.train import NumericFailure, evaluate, sgd_step, train


def small_cfg(**kw):
    base = dict(iterations=12, decay_at=8, n_scenes=6, hidden=16, stage_channels=(4, 8, 8),
                batch_size=2, proposal_scales=(16.0, 32.0), proposal_stride=16, K=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def scenes():
    return generate_scenes(6, 7)


class TestConfig:
    def test_round_trip(self):
        cfg = small_cfg(lr=0.0123, cadm=False, fusion_mode="addition")
        assert parse_config(format_config(cfg)) == cfg

    def test_every_field_addressable(self, tmp_path):
        text = format_config(TrainConfig())
        assert len(text.splitlines()) == len(TrainConfig.__dataclass_fields__)
        p = tmp_path / "c.txt"
        p.write_text("# comment\nlambda2 = 0.6\n\nstage_channels=4,8,16\n")
        cfg = load_config(p)
        assert cfg.lambda2 == 0.6 and cfg.stage_channels == (4, 8, 16)

    def test_errors(self):
        with pytest.raises(ConfigError):
            parse_config("nope=1")
        with pytest.raises(ConfigError):
            parse_config("lr=0")
        with pytest.raises(ConfigError):
            parse_config("decay_at=5000")
        with pytest.raises(ConfigError):
            parse_config("cadm=maybe")
        with pytest.raises(ConfigError):
            parse_config("no equals sign")
        with pytest.raises(ConfigError):
            parse_config("lr=fast")
        with pytest.raises(ConfigError):
            parse_config("stage_channels=8,x,32")

    def test_schedule(self):
        cfg = TrainConfig()
        assert cfg.lr_at(0) == cfg.lr and cfg.lr_at(cfg.decay_at) == cfg.lr_final


class TestSgd:
    def test_zero_lr_leaves_params(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), True)}
        p["w"].grad = np.array([5.0, 5.0])
        v = {"w": np.zeros(2)}
        sgd_step(p, v, 0.0, 0.9, 5e-4)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
        assert p["w"].grad is None

    def test_weight_decay_only(self):
        p = {"w": Tensor(np.array([2.0]), True)}
        sgd_step(p, {"w": np.zeros(1)}, 0.1, 0.9, 0.5)
        assert p["w"].data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)

    def test_momentum_accumulates(self):
        p = {"w": Tensor(np.array([0.0]), True)}
        v = {"w": np.zeros(1)}
        for _ in range(2):
            p["w"].grad = np.array([1.0])
            sgd_step(p, v, 0.1, 0.5, 0.0)
        # v1 = -0.1, v2 = -0.05 - 0.1
        assert p["w"].data[0] == pytest.approx(-0.25, abs=1e-15)


class TestTrain:
    def test_records_and_total_decomposition(self, scenes):
        cfg = small_cfg()
        res = train(cfg, scenes)
        assert [r["iter"] for r in res.records] == list(range(cfg.iterations))
        for r in res.records:
            assert set(r) >= {"iter", "L_cls", "L_ref", "L_dis", "total", "branch_taken"}
            assert len(r["L_ref"]) == cfg.K
            assert abs(r["total"] - (r["L_cls"] + r["L_dis"] + sum(r["L_ref"]))) < 1e-12
            assert r["branch_taken"] in ("drop", "importance")

    def test_log_file_lines(self, scenes):
        buf = io.StringIO()
        train(small_cfg(iterations=3, decay_at=1), scenes, log_file=buf)
        lines = [json.loads(x) for x in buf.getvalue().splitlines()]
        assert [x["iter"] for x in lines] == [0, 1, 2]

    def test_bit_identical_repeat(self, scenes):
        a = train(small_cfg(), scenes)
        b = train(small_cfg(), scenes)
        assert a.records == b.records
        for k in a.model.params:
            assert a.model.params[k].data.tobytes() == b.model.params[k].data.tobytes()

    def test_resume_matches_uninterrupted(self, scenes):
        cfg = small_cfg()
        full = train(cfg, scenes)
        half = train(cfg, scenes, until=5)
        ck = from_bytes(to_bytes(half.checkpoint()))
        rest = train(cfg, scenes, resume=ck)
        assert half.records + rest.records == full.records
        for k in full.model.params:
            assert full.model.params[k].data.tobytes() == rest.model.params[k].data.tobytes()

    def test_modules_off(self, scenes):
        res = train(small_cfg(cadm=False, gcm=False, iterations=3, decay_at=1), scenes)
        assert all(r["branch_taken"] is None for r in res.records)
        assert not any(k.startswith("gcm.") for k in res.model.params)

    def test_loss_decreases_when_overfitting(self):
        sc = generate_scenes(4, 1)
        cfg = small_cfg(iterations=150, decay_at=120, n_scenes=4, batch_size=4, flip_augment=False)
        rec = train(cfg, sc).records
        early = np.mean([r["total"] for r in rec[:10]])
        late = np.mean([r["total"] for r in rec[-10:]])
        assert late < early

    def test_needs_positive_labels(self, scenes):
        bad = scenes[0].__class__(scenes[0].image, [], 4)
        with pytest.raises(ValueError):
            train(small_cfg(), [bad])
        with pytest.raises(ValueError):
            train(small_cfg(), [])

    def test_non_finite_loss_is_reported(self, scenes, tmp_path, monkeypatch):
        cfg = small_cfg(iterations=2, decay_at=1)

        def broken(self, *a, **k):
            raise T.NonFiniteError("synthetic overflow")

        monkeypatch.setattr(Detector, "forward_train", broken)
        with pytest.raises(NumericFailure) as ei:
            train(cfg, scenes, dump_dir=str(tmp_path))
        assert ei.value.dump_path and np.load(ei.value.dump_path)["images"].shape[0] == 2


class TestEvaluate:
    def test_deterministic_and_bounded(self, scenes):
        model = Detector(small_cfg(), np.random.default_rng(0))
        a, b = evaluate(model, scenes), evaluate(model, scenes)
        assert a.mAP == b.mAP and a.corloc == b.corloc
        assert 0.0 <= a.mAP <= 1.0 and 0.0 <= a.corloc <= 1.0
        assert a.records()[-1]["mAP"] == a.mAP

    def test_oracle_detector_is_perfect(self, scenes):
        gts = ground_truths(scenes)
        dets = [Detection(g.image_id, g.class_id, 1.0, g.box) for g in gts]
        _, mean_ap, mean_cl = evaluate_detections(dets, dets, gts, 4)
        assert mean_ap == 1.0 and mean_cl == 1.0

    def test_predict_shapes(self, scenes):
        cfg = small_cfg()
        model = Detector(cfg, np.random.default_rng(0))
        from cadwsod.train import proposals_for
        boxes = proposals_for(cfg, 64, 64)
        out = model.predict(np.stack([s.image for s in scenes[:2]]), [boxes] * 2)
        assert len(out) == 2 and out[0].shape == (len(boxes), cfg.classes)
        assert np.isfinite(out[0]).all()

    def test_flip_averaging_is_mirror_symmetric(self, scenes):
        cfg = small_cfg(eval_flip=True)
        model = Detector(cfg, np.random.default_rng(0))
        from cadwsod.train import proposals_for
        boxes = proposals_for(cfg, 64, 64)
        mirrored = np.stack([64 - boxes[:, 2], boxes[:, 1], 64 - boxes[:, 0], boxes[:, 3]], axis=1)
        img = scenes[0].image[None]
        a = model.predict(img, [boxes])[0]
        b = model.predict(img[..., ::-1], [mirrored])[0]
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-15)
        plain = Detector(small_cfg(), np.random.default_rng(0)).predict(img, [boxes])[0]
        assert not np.allclose(a, plain)
