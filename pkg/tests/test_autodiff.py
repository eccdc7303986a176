import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from jetrep import autodiff as ad
from jetrep.gradcheck import max_rel_error


def node(arr, grad=True):
    return ad.TensorNode(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = node(np.eye(2))
        b = node([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(a, b).values, [[1.0, 2.0], [3.0, 4.0]])

    def test_annihilating_row(self):
        a = node([[1.0, 0.0], [0.0, 0.0]])
        b = node([[0.0], [5.0]])
        assert np.array_equal(ad.matmul(a, b).values, [[0.0], [0.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
            ad.matmul(node(np.zeros((3, 4))), node(np.zeros((3, 2))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(7)
        a = node(rng.standard_normal((3, 4)))
        b = node(rng.standard_normal((4, 2)))
        w = rng.standard_normal((3, 2))  # fixed projection to a scalar
        err = max_rel_error(lambda: ad.reduce_sum(ad.matmul(a, b) * w), [a, b])
        assert err < 1e-4

    def test_batched_gradient(self):
        rng = np.random.default_rng(8)
        a = node(rng.standard_normal((2, 3, 5, 4)))
        b = node(rng.standard_normal((4, 6)))
        err = max_rel_error(lambda: ad.reduce_sum(ad.matmul(a, b)), [a, b],
                            max_coords_per_tensor=40, rng=np.random.default_rng(0))
        assert err < 1e-4


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(node([0.0, 0.0]), axis=-1)
        assert np.allclose(out.values, [0.5, 0.5], atol=1e-15)

    def test_max_shift_stability(self):
        out = ad.softmax(node([1000.0, 1000.0]), axis=-1)
        assert np.allclose(out.values, [0.5, 0.5], atol=1e-15)
        assert np.all(np.isfinite(out.values))

    def test_known_ratios(self):
        x = node(np.log([1.0, 2.0, 3.0]))
        out = ad.softmax(x, axis=-1)
        assert np.allclose(out.values, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_gradient(self):
        x = node(np.log([1.0, 2.0, 3.0]))
        w = np.array([0.3, -1.1, 0.7])
        err = max_rel_error(lambda: ad.reduce_sum(ad.softmax(x, axis=-1) * w), [x])
        assert err < 1e-4

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, xs):
        out = ad.softmax(node(xs), axis=-1)
        assert abs(out.values.sum() - 1.0) < 1e-12


class TestLayerNorm:
    def test_constant_vector_collapses_to_bias(self):
        x = node([3.7, 3.7, 3.7])
        out = ad.layer_norm(x, node(np.ones(3)), node(np.zeros(3)))
        assert np.allclose(out.values, 0.0, atol=1e-12)

    def test_unit_variance_input_preserved(self):
        x = node([1.0, -1.0])
        out = ad.layer_norm(x, node(np.ones(2)), node(np.zeros(2)))
        assert np.allclose(out.values, [1.0, -1.0], atol=1e-4)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            ad.layer_norm(node([1.0]), node([1.0]), node([0.0]), eps=0.0)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = node(rng.standard_normal((2, 8)))
        g = node(rng.standard_normal(8))
        b = node(rng.standard_normal(8))
        w = rng.standard_normal((2, 8))
        err = max_rel_error(lambda: ad.reduce_sum(ad.layer_norm(x, g, b) * w), [x, g, b])
        assert err < 1e-4


class TestGelu:
    def test_zero(self):
        assert ad.gelu(node([0.0])).values[0] == 0.0

    def test_value_at_one_matches_normal_cdf(self):
        # oracle: Phi(1) from erf
        phi1 = 0.5 * (1.0 + erf(1.0 / np.sqrt(2.0)))
        out = ad.gelu(node([1.0])).values[0]
        assert abs(out - phi1) < 1e-12
        assert abs(out - 0.841345) < 1e-6

    @given(st.floats(-10, 10))
    @settings(max_examples=80, deadline=None)
    def test_symmetry_identity(self, x):
        # gelu(x) - gelu(-x) == x from Phi(x) + Phi(-x) = 1
        vals = ad.gelu(node([x, -x])).values
        assert abs(vals[0] - vals[1] - x) < 1e-12 * max(1.0, abs(x))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = node(rng.standard_normal(16))
        err = max_rel_error(lambda: ad.reduce_sum(ad.gelu(x)), [x])
        assert err < 1e-4


class TestGeglu:
    def test_gate_closed(self):
        x = node(np.zeros((2, 3)))
        w = node(np.random.default_rng(0).standard_normal((3, 4)))
        v = node(np.random.default_rng(1).standard_normal((3, 4)))
        assert np.allclose(ad.geglu(x, w, v).values, 0.0, atol=1e-15)

    def test_zero_value_path(self):
        rng = np.random.default_rng(2)
        x = node(rng.standard_normal((2, 3)))
        w = node(rng.standard_normal((3, 4)))
        v = node(np.zeros((3, 4)))
        assert np.allclose(ad.geglu(x, w, v).values, 0.0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.geglu(node(np.zeros((2, 3))), node(np.zeros((3, 4))), node(np.zeros((3, 5))))

    def test_gradient(self):
        rng = np.random.default_rng(11)
        x = node(rng.standard_normal((2, 3)))
        w = node(rng.standard_normal((3, 4)))
        v = node(rng.standard_normal((3, 4)))
        err = max_rel_error(lambda: ad.reduce_sum(ad.geglu(x, w, v)), [x, w, v])
        assert err < 1e-4


class TestDropout:
    def test_rate_zero_is_all_ones(self):
        rng = np.random.default_rng(0)
        assert np.array_equal(ad.dropout_mask((4, 4), 0.0, rng, training=True), np.ones((4, 4)))

    def test_inference_passthrough(self):
        rng = np.random.default_rng(0)
        assert np.array_equal(ad.dropout_mask((4, 4), 0.5, rng, training=False), np.ones((4, 4)))

    def test_rate_out_of_range(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            ad.dropout_mask((2,), 1.0, rng, training=True)
        with pytest.raises(ValueError):
            ad.dropout_mask((2,), -0.1, rng, training=True)

    def test_empirical_keep_fraction(self):
        rng = np.random.default_rng(123)
        mask = ad.dropout_mask((1_000_000,), 0.5, rng, training=True)
        keep_fraction = np.count_nonzero(mask) / mask.size
        assert abs(keep_fraction - 0.5) < 0.002
        # kept entries are scaled by 1/(1-rate)
        assert np.allclose(mask[mask > 0], 2.0)


class TestDropPath:
    def test_identity_when_disabled(self):
        x = node(np.random.default_rng(0).standard_normal((4, 3)))
        out = ad.drop_path(x, 0.0, 1.0, np.random.default_rng(0), training=True)
        assert out is x

    def test_inference_deterministic_scaling(self):
        x = node(np.random.default_rng(0).standard_normal((4, 3)))
        out = ad.drop_path(x, 0.1, 0.9, np.random.default_rng(0), training=False)
        assert np.allclose(out.values, x.values * 0.9, atol=1e-15)

    def test_zeroed_sample_fraction(self):
        rng = np.random.default_rng(77)
        x = node(np.ones((100_000, 2)))
        out = ad.drop_path(x, 0.1, 1.0, rng, training=True)
        zeroed = np.count_nonzero(out.values[:, 0] == 0.0) / 100_000
        assert abs(zeroed - 0.1) < 0.01

    def test_rate_validation(self):
        with pytest.raises(ValueError):
            ad.drop_path(node([1.0]), 1.0, 1.0, np.random.default_rng(0), training=True)


class TestBackward:
    def test_sum_gives_ones(self):
        p = node(np.arange(6.0).reshape(2, 3))
        with ad.GradientTape() as tape:
            loss = ad.reduce_sum(p)
        ad.backward(loss, tape)
        assert np.array_equal(p.grad, np.ones((2, 3)))

    def test_zero_times_function_gives_zeros(self):
        p = node([1.0, 2.0, 3.0])
        with ad.GradientTape() as tape:
            loss = ad.reduce_sum(ad.exp(p) * 0.0)
        ad.backward(loss, tape)
        assert np.array_equal(p.grad, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        p = node([1.0, 2.0])
        with ad.GradientTape() as tape:
            y = p * 2.0
        with pytest.raises(ad.AutodiffError):
            ad.backward(y, tape)

    def test_repeatable_for_fixed_seed(self):
        def run():
            rng = np.random.default_rng(42)
            p = node(np.linspace(-1, 1, 12).reshape(3, 4))
            mask = ad.dropout_mask((3, 4), 0.3, rng, training=True)
            with ad.GradientTape() as tape:
                loss = ad.reduce_sum(ad.gelu(p * mask))
            ad.backward(loss, tape)
            return p.grad.copy()

        assert np.array_equal(run(), run())

    def test_grad_accumulates_across_reuse(self):
        p = node([2.0])
        with ad.GradientTape() as tape:
            loss = ad.reduce_sum(p * p)  # d/dp = 2p = 4
        ad.backward(loss, tape)
        assert np.allclose(p.grad, [4.0])


class TestCompositeGradients:
    """Finite-difference checks through nontrivial compositions."""

    @pytest.mark.parametrize("seed", range(5))
    def test_mlp_block(self, seed):
        rng = np.random.default_rng(seed)
        x = node(rng.standard_normal((3, 5)))
        w1 = node(rng.standard_normal((5, 7)) * 0.5)
        b1 = node(rng.standard_normal(7) * 0.1)
        w2 = node(rng.standard_normal((7, 2)) * 0.5)

        def loss_fn():
            h = ad.gelu(ad.add(ad.matmul(x, w1), b1))
            return ad.reduce_mean(ad.matmul(h, w2))

        assert max_rel_error(loss_fn, [x, w1, b1, w2]) < 1e-4

    def test_attention_like_composition(self):
        rng = np.random.default_rng(19)
        q = node(rng.standard_normal((2, 4, 3)))
        k = node(rng.standard_normal((2, 4, 3)))
        v = node(rng.standard_normal((2, 4, 3)))

        def loss_fn():
            logits = ad.matmul(q, ad.transpose(k, (0, 2, 1)))
            w = ad.softmax(logits, axis=-1)
            return ad.reduce_sum(ad.matmul(w, v))

        assert max_rel_error(loss_fn, [q, k, v]) < 1e-4

    def test_elementwise_chain(self):
        rng = np.random.default_rng(23)
        x = node(rng.random(10) + 0.5)

        def loss_fn():
            return ad.reduce_sum(ad.log(ad.sqrt(x) + 1.0) * ad.relu(x - 0.8))

        assert max_rel_error(loss_fn, [x]) < 1e-4

    def test_concat_gather_reductions(self):
        rng = np.random.default_rng(29)
        a = node(rng.standard_normal((3, 4)))
        b = node(rng.standard_normal((2, 4)))
        idx = np.array([0, 2, 4, 2])

        def loss_fn():
            joined = ad.concat([a, b], axis=0)
            picked = ad.gather_rows(joined, idx)
            return ad.reduce_mean(ad.mul(picked, picked))

        assert max_rel_error(loss_fn, [a, b]) < 1e-4

    def test_l2_normalize_rows(self):
        rng = np.random.default_rng(31)
        x = node(rng.standard_normal((4, 6)))
        w = rng.standard_normal((4, 6))
        out = ad.l2_normalize(x)
        norms = np.linalg.norm(out.values, axis=-1)
        assert np.all(np.abs(norms - 1.0) < 1e-12)
        err = max_rel_error(lambda: ad.reduce_sum(ad.l2_normalize(x) * w), [x])
        assert err < 1e-4

    def test_log_softmax_gradient(self):
        rng = np.random.default_rng(37)
        x = node(rng.standard_normal((3, 5)) * 3)
        w = rng.standard_normal((3, 5))
        err = max_rel_error(lambda: ad.reduce_sum(ad.log_softmax(x, axis=-1) * w), [x])
        assert err < 1e-4


def test_values_stay_finite_through_masked_softmax():
    # -1e9 additive masking must not produce NaN/Inf anywhere
    x = node(np.array([[1.0, 2.0, 3.0]]))
    mask = np.array([[0.0, -1e9, 0.0]])
    out = ad.softmax(ad.add(x, mask), axis=-1)
    assert np.all(np.isfinite(out.values))
    assert out.values[0, 1] == 0.0
    assert abs(out.values.sum() - 1.0) < 1e-12
