import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadwsod import gcm as G
from cadwsod import tensor as T
from cadwsod.gradcheck import grad_check
from cadwsod.tensor import Tensor


def params(d=8, seed=0, zero_w3=False, fusion="multiplication_then_addition"):
    return G.GcmParams.init(d, np.random.default_rng(seed), 4, 1e-5, fusion, zero_w3=zero_w3)


class TestAttentionPool:
    def test_zero_logits_give_spatial_mean(self):
        x = np.random.default_rng(0).normal(size=(2, 8, 3, 5))
        beta = G.global_attention_pool(Tensor(x), Tensor(np.zeros((1, 8, 1, 1)))).data
        np.testing.assert_allclose(beta, x.mean(axis=(2, 3)), atol=1e-12)

    def test_dominant_position(self):
        x = np.random.default_rng(1).normal(size=(1, 2, 2, 2))
        x[0, 0, 1, 0] = 200.0
        w1 = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
        beta = G.global_attention_pool(Tensor(x), Tensor(w1)).data
        np.testing.assert_allclose(beta[0], x[0, :, 1, 0], rtol=1e-12)

    def test_two_position_hand_value(self):
        # logits [0, ln 3] from a single channel whose features are [1, 5]
        # are produced by w1 acting on a second channel
        x = np.zeros((1, 2, 1, 2))
        x[0, 0, 0] = [1.0, 5.0]
        x[0, 1, 0] = [0.0, math.log(3)]
        beta = G.global_attention_pool(Tensor(x), Tensor(np.array([0.0, 1.0]).reshape(1, 2, 1, 1)))
        assert abs(beta.data[0, 0] - 4.0) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 8, 3, 4))
        p = params(seed=seed)
        perm = rng.permutation(12)
        xp = x.reshape(1, 8, 12)[:, :, perm].reshape(1, 8, 3, 4)
        b1 = G.global_attention_pool(Tensor(x), p.w1).data
        b2 = G.global_attention_pool(Tensor(xp), p.w1).data
        np.testing.assert_allclose(b1, b2, atol=1e-12)

    def test_attention_sums_to_one(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 8, 4, 4))
        p = params()
        logits = T.conv2d(Tensor(x), p.w1, 1, 0)
        a = T.softmax_axis(T.reshape(logits, (3, 16)), 1).data
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


class TestBottleneck:
    def test_zero_w3_gives_half(self):
        beta = Tensor(np.random.default_rng(0).normal(size=(2, 8)))
        np.testing.assert_array_equal(G.bottleneck_transform(beta, params(zero_w3=True)).data, 0.5)

    def test_range(self):
        beta = Tensor(np.random.default_rng(0).normal(size=(5, 8)) * 30)
        d = G.bottleneck_transform(beta, params()).data
        assert ((d > 0) & (d < 1)).all()

    def test_ln_stage_moments(self):
        p = params()
        beta = Tensor(np.random.default_rng(3).normal(size=(4, 8)))
        z = T.layer_norm(T.matmul(beta, p.w2), -1, 1e-12).data
        np.testing.assert_allclose(z.mean(axis=1), 0, atol=1e-6)
        np.testing.assert_allclose(z.var(axis=1), 1, atol=1e-6)

    def test_ratio_must_divide(self):
        with pytest.raises(ValueError):
            G.GcmParams.init(10, np.random.default_rng(0), 4)
        p = params(d=8)
        with pytest.raises(ValueError):
            G.bottleneck_transform(Tensor(np.ones((1, 6))), p)


class TestGcmForward:
    def test_default_fusion_with_zero_w3_is_exact_1p5(self):
        x = np.random.default_rng(0).normal(size=(2, 8, 4, 4))
        out = G.gcm_forward(Tensor(x), params(zero_w3=True)).data
        np.testing.assert_array_equal(out, 1.5 * x)

    def test_addition_variant(self):
        x = np.random.default_rng(0).normal(size=(1, 8, 2, 2))
        out = G.gcm_forward(Tensor(x), params(zero_w3=True, fusion="addition")).data
        np.testing.assert_array_equal(out, x + 0.5)

    def test_multiplication_variant(self):
        x = np.random.default_rng(0).normal(size=(1, 8, 2, 2))
        out = G.gcm_forward(Tensor(x), params(zero_w3=True, fusion="multiplication")).data
        np.testing.assert_array_equal(out, x * 0.5)

    def test_all_zero_weights(self):
        x = np.random.default_rng(4).normal(size=(1, 8, 3, 3))
        p = params()
        for t in p.tensors().values():
            t.data = np.zeros_like(t.data)
        np.testing.assert_array_equal(G.gcm_forward(Tensor(x), p).data, 1.5 * x)

    def test_default_fusion_bounds(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 8, 4, 4))
        out = G.gcm_forward(Tensor(x), params(seed=3)).data
        assert (np.sign(out) == np.sign(x)).all()
        assert (np.abs(out) > np.abs(x)).all() and (np.abs(out) < 2 * np.abs(x)).all()

    @pytest.mark.parametrize("fusion", G.FUSION_MODES)
    def test_full_path_gradient(self, fusion):
        rng = np.random.default_rng(6)
        p = params(seed=1, fusion=fusion)
        x0 = rng.normal(size=(2, 8, 3, 3))
        up = rng.normal(size=x0.shape)

        def f(x):
            return T.reduce(T.mul(G.gcm_forward(x, p), Tensor(up)), (0, 1, 2, 3))

        rep = grad_check(f, x0, n_samples=80)
        assert rep.passed, rep.max_error
        for name in ("w1", "w2", "w3"):
            w = getattr(p, name)

            def fw(wt, name=name):
                q = G.GcmParams(**{**p.tensors(), name: wt}, bottleneck_ratio=4,
                                fusion_mode=fusion)
                return T.reduce(T.mul(G.gcm_forward(Tensor(x0), q), Tensor(up)), (0, 1, 2, 3))

            rep = grad_check(fw, w.data)
            assert rep.passed, (name, rep.max_error)

    def test_unknown_fusion(self):
        with pytest.raises(ValueError):
            params(fusion="concat")
