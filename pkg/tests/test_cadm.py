import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cadwsod import cadm as C
from cadwsod import tensor as T
from cadwsod.gradcheck import grad_check
from cadwsod.tensor import Tensor


def brute_channel_mask(f, lam):
    """Loop re-derivation of the channel-dropout rule."""
    n, d = f.shape
    out = np.ones((n, d, 1, 1))
    for i in range(n):
        fmax = max(f[i])
        for j in range(d):
            if f[i][j] > fmax * lam:
                out[i, j, 0, 0] = 0
    return out


def brute_spatial_mask(a, lam):
    n, _, h, w = a.shape
    out = np.ones_like(a)
    for i in range(n):
        for r in range(h):
            gmax = max(a[i, 0, r])
            for c in range(w):
                if a[i, 0, r, c] > gmax * lam:
                    out[i, 0, r, c] = 0
    return out


class TestChannelConfidence:
    def test_constant(self):
        f = C.channel_confidence(Tensor(np.full((1, 3, 2, 2), 2.5)))
        np.testing.assert_array_equal(f.data, 2.5)

    def test_hand_mean(self):
        x = np.zeros((1, 2, 2, 2))
        x[0, 0] = [[1, 3], [5, 7]]
        assert C.channel_confidence(Tensor(x)).data[0, 0] == 4.0

    def test_equals_spatial_mean(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
        np.testing.assert_array_equal(C.channel_confidence(Tensor(x)).data,
                                      T.reduce(Tensor(x), (2, 3), "mean").data)


class TestChannelDropMask:
    def test_hand_example(self):
        m = C.channel_drop_mask(np.array([[1.0, 0.5, 0.9]]), 0.8)
        assert m.shape == (1, 3, 1, 1)
        np.testing.assert_array_equal(m.ravel(), [0, 1, 0])

    def test_lambda_one_drops_nothing(self):
        f = np.random.default_rng(1).random((3, 6))
        np.testing.assert_array_equal(C.channel_drop_mask(f, 1.0), 1.0)

    def test_all_equal_positive_drops_all(self):
        np.testing.assert_array_equal(C.channel_drop_mask(np.full((1, 4), 0.3), 0.8), 0.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            f = rng.normal(size=(2, 5))
            lam = rng.uniform(0.05, 1.0)
            np.testing.assert_array_equal(C.channel_drop_mask(f, lam), brute_channel_mask(f, lam))


class TestApplyChannelMask:
    def test_identity_and_annihilation(self):
        x = np.random.default_rng(0).normal(size=(1, 3, 2, 2))
        np.testing.assert_array_equal(C.apply_channel_mask(Tensor(x), np.ones((1, 3, 1, 1))).data, x)
        m = np.ones((1, 3, 1, 1))
        m[0, 0] = 0
        out = C.apply_channel_mask(Tensor(x), m).data
        np.testing.assert_array_equal(out[0, 0], 0.0)
        np.testing.assert_array_equal(out[0, 1:], x[0, 1:])

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            C.apply_channel_mask(Tensor(np.ones((1, 3, 2, 2))), np.ones((1, 2, 1, 1)))

    def test_gradient_is_masked_upstream(self):
        rng = np.random.default_rng(3)
        m = (rng.random((1, 4, 1, 1)) > 0.5).astype(float)
        up = rng.normal(size=(1, 4, 3, 3))
        f = lambda x: T.reduce(T.mul(C.apply_channel_mask(x, m), Tensor(up)), (0, 1, 2, 3))
        rep = grad_check(f, rng.normal(size=(1, 4, 3, 3)))
        assert rep.passed
        np.testing.assert_allclose(rep.analytic, (up * m).ravel(), rtol=0, atol=0)


class TestSelfAttention:
    def test_single_channel(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 3, 3))
        np.testing.assert_array_equal(C.self_attention_map(Tensor(x)).data, x)

    def test_hand_mean(self):
        x = np.zeros((1, 2, 1, 1))
        x[0, :, 0, 0] = [2, 4]
        assert C.self_attention_map(Tensor(x)).data.item() == 3.0

    def test_all_dropped_gives_zero(self):
        x = np.random.default_rng(1).random((1, 3, 2, 2))
        xcd = C.apply_channel_mask(Tensor(x), np.zeros((1, 3, 1, 1)))
        np.testing.assert_array_equal(C.self_attention_map(xcd).data, 0.0)


class TestSpatialDropMask:
    def test_hand_example(self):
        a = np.array([[[[1.0, 0.5], [0.2, 0.9]]]])
        np.testing.assert_array_equal(C.spatial_drop_mask(a, 0.8)[0, 0], [[0, 1], [1, 0]])

    def test_constant_row_drops(self):
        a = np.full((1, 1, 2, 3), 0.4)
        np.testing.assert_array_equal(C.spatial_drop_mask(a, 0.9), 0.0)

    def test_non_positive_row(self):
        a = np.array([[[[-1.0, -2.0]]]])
        np.testing.assert_array_equal(C.spatial_drop_mask(a, 0.8), 1.0)

    def test_map_scope_uses_global_max(self):
        a = np.array([[[[1.0, 0.5], [0.2, 0.9]]]])
        np.testing.assert_array_equal(C.spatial_drop_mask(a, 0.8, "map")[0, 0], [[0, 1], [1, 0]])
        a2 = np.array([[[[1.0, 0.5], [0.2, 0.3]]]])
        np.testing.assert_array_equal(C.spatial_drop_mask(a2, 0.8, "map")[0, 0], [[0, 1], [1, 1]])
        np.testing.assert_array_equal(C.spatial_drop_mask(a2, 0.8, "row")[0, 0], [[0, 1], [1, 0]])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            a = rng.normal(size=(2, 1, 3, 4))
            lam = rng.uniform(0.05, 1.0)
            np.testing.assert_array_equal(C.spatial_drop_mask(a, lam), brute_spatial_mask(a, lam))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (1, 1, 4, 5), elements=st.floats(0.01, 10)),
           st.floats(0.05, 0.999))
    def test_positive_rows_drop_something(self, a, lam):
        m = C.spatial_drop_mask(a, lam)
        assert (m.min(axis=3) == 0).all()
        assert set(np.unique(m)) <= {0.0, 1.0}

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (2, 3, 3, 4), elements=st.floats(0, 10)),
           st.sampled_from([0.5, 2.0, 4.0, 0.25]))
    def test_scale_invariance(self, x, s):
        # power-of-two scale factors keep the comparisons exact in floating point
        lam1, lam2 = 0.8, 0.7
        m1 = C.channel_drop_mask(C.channel_confidence(Tensor(x)), lam1)
        m2 = C.channel_drop_mask(C.channel_confidence(Tensor(x * s)), lam1)
        np.testing.assert_array_equal(m1, m2)
        a1 = C.self_attention_map(Tensor(x)).data
        a2 = C.self_attention_map(Tensor(x * s)).data
        np.testing.assert_array_equal(C.spatial_drop_mask(a1, lam2), C.spatial_drop_mask(a2, lam2))


class TestImportanceMap:
    def test_zero_gives_half(self):
        np.testing.assert_array_equal(C.importance_map(Tensor(np.zeros((1, 1, 2, 2)))).data, 0.5)

    def test_saturation_and_monotone(self):
        m = C.importance_map(Tensor(np.array([[[[-3.0, 0.0, 3.0, 40.0]]]]))).data.ravel()
        assert np.all(np.diff(m) > 0)
        assert m[-1] > 1 - 1e-12
        assert ((m > 0) & (m <= 1)).all()


class TestCadmForward:
    def test_drop_rate_zero_always_importance(self):
        cfg = C.CadmConfig(drop_rate=0.0)
        rng = np.random.default_rng(0)
        x = Tensor(np.random.default_rng(1).random((1, 4, 4, 4)))
        for _ in range(200):
            _, dec = C.cadm_forward(x, cfg, "train", rng)
            assert dec.branch_taken == "importance"

    def test_drop_rate_one_drops(self):
        cfg = C.CadmConfig(drop_rate=1.0)
        rng = np.random.default_rng(0)
        x = Tensor(np.random.default_rng(1).random((1, 4, 4, 4)))
        branches = {C.cadm_forward(x, cfg, "train", rng)[1].branch_taken for _ in range(200)}
        assert branches == {"drop"}
        assert C.branch_for(0.0, 1.0) == "importance"

    def test_branch_frequency(self):
        cfg = C.CadmConfig(drop_rate=0.8)
        rng = np.random.default_rng(11)
        x = Tensor(np.ones((1, 2, 4, 4)))
        hits = sum(C.cadm_forward(x, cfg, "train", rng)[1].branch_taken == "drop"
                   for _ in range(10000))
        assert 0.78 <= hits / 10000 <= 0.82

    def test_branch_rule_matches_alpha(self):
        rng = np.random.default_rng(5)
        x = Tensor(np.random.default_rng(2).random((2, 3, 4, 4)))
        for dr in (0.2, 0.5, 0.8):
            for _ in range(100):
                _, dec = C.cadm_forward(x, C.CadmConfig(drop_rate=dr), "train", rng)
                assert (dec.branch_taken == "drop") == (dec.alpha + dr > 1)
                assert 0 <= dec.alpha < 1

    def test_drop_branch_output(self):
        x = np.random.default_rng(3).random((2, 4, 4, 4))
        cfg = C.CadmConfig(drop_rate=1.0)
        out, dec = C.cadm_forward(Tensor(x), cfg, "train", np.random.default_rng(0))
        np.testing.assert_array_equal(out.data, x * dec.channel_mask * dec.spatial_mask)

    def test_importance_branch_output(self):
        x = np.random.default_rng(3).random((2, 4, 4, 4))
        cfg = C.CadmConfig(drop_rate=0.0)
        out, dec = C.cadm_forward(Tensor(x), cfg, "train", np.random.default_rng(0))
        xcd = x * dec.channel_mask
        np.testing.assert_allclose(out.data, xcd / (1 + np.exp(-xcd.mean(axis=1, keepdims=True))),
                                   rtol=1e-14)

    def test_eval_mode_bypass_bit_exact(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 4, 4)))
        out, dec = C.cadm_forward(x, C.CadmConfig(), "eval")
        assert dec is None
        np.testing.assert_array_equal(out.data, x.data)

    def test_train_needs_rng(self):
        with pytest.raises(ValueError):
            C.cadm_forward(Tensor(np.ones((1, 1, 2, 2))), C.CadmConfig(), "train")

    def test_masks_binary(self):
        x = Tensor(np.random.default_rng(9).normal(size=(3, 5, 4, 4)))
        _, dec = C.cadm_forward(x, C.CadmConfig(), "train", np.random.default_rng(1))
        assert set(np.unique(dec.channel_mask)) <= {0.0, 1.0}
        assert set(np.unique(dec.spatial_mask)) <= {0.0, 1.0}
        assert ((dec.importance_map > 0) & (dec.importance_map < 1)).all()

    @pytest.mark.parametrize("dims", ["channel", "spatial"])
    def test_single_dimension_variants(self, dims):
        x = np.random.default_rng(3).random((1, 4, 4, 4))
        cfg = C.CadmConfig(drop_rate=1.0, dims=dims)
        out, dec = C.cadm_forward(Tensor(x), cfg, "train", np.random.default_rng(0))
        if dims == "channel":
            np.testing.assert_array_equal(out.data, x * dec.channel_mask)
        else:
            np.testing.assert_array_equal(dec.channel_mask, 1.0)
            np.testing.assert_array_equal(out.data, x * dec.spatial_mask)

    @pytest.mark.parametrize("branch_rate", [1.0, 0.0])
    def test_gradient_with_frozen_masks(self, branch_rate):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(2, 6, 4, 4))
        cfg = C.CadmConfig(drop_rate=branch_rate)
        _, dec = C.cadm_forward(Tensor(x0), cfg, "train", np.random.default_rng(1))
        up = rng.normal(size=x0.shape)

        def f(x):
            out, _ = C.cadm_forward(x, cfg, "train", decision=dec)
            return T.reduce(T.mul(out, Tensor(up)), (0, 1, 2, 3))

        rep = grad_check(f, x0)
        assert rep.passed, rep.max_error
        if branch_rate == 1.0:
            np.testing.assert_allclose(rep.analytic,
                                       (up * dec.channel_mask * dec.spatial_mask).ravel(), atol=0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            C.CadmConfig(lambda1=0.0)
        with pytest.raises(ValueError):
            C.CadmConfig(drop_rate=1.5)
        with pytest.raises(ValueError):
            C.CadmConfig(spatial_max_scope="column")
