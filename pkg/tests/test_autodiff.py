import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adarec import autodiff as ad
from adarec.autodiff import NonFiniteError, ShapeError, Tensor

from gradcases import PRIMITIVE_CASES, worst_error

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestOpLibrary:
    def test_exact_primitive_set(self):
        assert set(ad.op_library()) == {
            "add", "multiply_by_scalar", "matmul", "embedding", "causal_dilated_conv1d", "relu",
            "layer_norm", "softmax", "log", "mse", "kl_div", "dropout", "max_pool1d", "avg_pool1d",
            "attention", "sum", "mean"}

    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_zero_kernel_conv(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 3)))
        out = ad.conv1d(x, Tensor(np.zeros((3, 3, 4))), Tensor(np.zeros(4)), dilation=2)
        np.testing.assert_array_equal(out.data, np.zeros((2, 5, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_add_rejects_incompatible(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_max_pool_left_padding(self):
        x = Tensor(np.array([1.0, 5.0, 2.0, 4.0])[None, :, None])
        np.testing.assert_array_equal(ad.max_pool1d(x, 3).data[0, :, 0], [1, 5, 5, 5])

    def test_avg_pool_counts_padding(self):
        x = Tensor(np.array([3.0, 3.0, 3.0])[None, :, None])
        np.testing.assert_allclose(ad.avg_pool1d(x, 3).data[0, :, 0], [1, 2, 3])

    def test_dropout_without_rng_is_identity(self):
        x = Tensor(np.ones((2, 3)))
        assert ad.dropout(x, 0.5, None) is x

    def test_dropout_inverted_scaling(self):
        out = ad.dropout(Tensor(np.ones(200_000)), 0.3, np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 1.0 / 0.7}
        assert abs(out.mean() - 1.0) < 0.01

    def test_log_floor(self):
        out = ad.log(Tensor([0.0, 1.0]), floor=1e-12)
        np.testing.assert_allclose(out.data, [np.log(1e-12), 0.0])

    def test_attention_rows_cover_allowed_only(self):
        rng = np.random.default_rng(1)
        v = Tensor(rng.normal(size=(1, 4, 2)))
        out = ad.attention(Tensor(np.zeros((1, 4, 2))), Tensor(np.zeros((1, 4, 2))), v)
        # equal scores: each query averages the causal prefix
        expect = np.cumsum(v.data[0], axis=0) / np.arange(1, 5)[:, None]
        np.testing.assert_allclose(out.data[0], expect, atol=1e-15)

    def test_straight_through_forward_and_gradient(self):
        y = Tensor(np.array([0.2, 0.5, 0.3]), requires_grad=True)
        out = ad.straight_through(y)
        np.testing.assert_array_equal(out.data, [0, 1, 0])
        w = np.array([1.0, 2.0, 3.0])
        grads = ad.backward(ad.sum(ad.mul(out, w)))
        np.testing.assert_array_equal(grads[y], w)


class TestFiniteness:
    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflow_rejected(self):
        with pytest.raises(NonFiniteError):
            ad.mul(Tensor([1e300]), Tensor([1e300]))


class TestBackward:
    def test_linear(self):
        x = Tensor(np.ones(3), requires_grad=True)
        grads = ad.backward(ad.sum(ad.mul(x, 2.0)))
        np.testing.assert_array_equal(grads[x], [2, 2, 2])

    def test_mse_of_itself(self):
        x = Tensor(np.random.default_rng(0).normal(size=4), requires_grad=True)
        grads = ad.backward(ad.mse(x, x))
        np.testing.assert_array_equal(grads[x], np.zeros(4))

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ShapeError):
            ad.backward(Tensor(np.ones(2), requires_grad=True))

    def test_kl_of_softmaxes_matches_differences(self):
        rng = np.random.default_rng(3)
        b = ad.softmax(Tensor(rng.normal(size=6)))
        err = ad.finite_difference_check(lambda a: ad.kl_div(ad.softmax(a), b), rng.normal(size=6))
        assert err < 1e-4

    def test_gradient_shape_matches_value(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        y = Tensor(np.ones((3, 4)), requires_grad=True)
        grads = ad.backward(ad.sum(ad.matmul(x, y)))
        assert grads[x].shape == x.shape and grads[y].shape == y.shape

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = ad.mul(x, x)
        grads = ad.backward(ad.sum(ad.add(y, y)))
        np.testing.assert_array_equal(grads[x], [4.0, 8.0])

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            out = ad.sum(ad.dropout(ad.softmax(x), 0.2, rng))
            return out.data, ad.backward(out)[x]

        (a, ga), (b, gb) = run(), run()
        assert a == b
        np.testing.assert_array_equal(ga, gb)


class TestFiniteDifferenceCheck:
    def test_quadratic(self):
        assert ad.finite_difference_check(lambda x: ad.sum(ad.mul(x, x)), np.array([3.0])) < 1e-6

    def test_layer_norm_sum(self):
        rng = np.random.default_rng(0)
        g, b = Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))
        err = ad.finite_difference_check(lambda x: ad.sum(ad.layer_norm(x, g, b)), rng.normal(size=8))
        assert err < 1e-4

    def test_constant(self):
        assert ad.finite_difference_check(lambda x: Tensor(1.0), np.ones(3)) == 0.0

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            ad.finite_difference_check(lambda x: ad.sum(x), np.ones(2), eps=0)

    def test_non_finite_reported(self):
        def fn(x):
            return ad.sum(ad.log(x))  # log(0 - eps) would be nan, surfaced as an error

        with pytest.raises(NonFiniteError):
            ad.finite_difference_check(fn, np.array([0.0 + 1e-6]))


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradient(name):
    assert worst_error(PRIMITIVE_CASES[name], 20, seed=11) < 1e-4


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
    def test_softmax_is_distribution(self, x):
        p = ad.softmax(Tensor(x)).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 3))
    def test_conv_causality(self, seed, k, dil):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 8, 2))
        w, b = Tensor(rng.normal(size=(k, 2, 3))), Tensor(rng.normal(size=3))
        j = int(rng.integers(0, 8))
        y = x.copy()
        y[:, j:] += rng.normal(size=y[:, j:].shape)
        a = ad.conv1d(Tensor(x), w, b, dil).data
        c = ad.conv1d(Tensor(y), w, b, dil).data
        np.testing.assert_array_equal(a[:, :j], c[:, :j])
