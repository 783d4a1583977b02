import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clsr import autodiff as ad
from clsr.gradcheck import check_gradients

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(value, name=None):
    return ad.parameter(np.asarray(value, dtype=np.float64), name=name)


class TestForwardValues:
    def test_square(self):
        x = leaf([[3.0]])
        npt.assert_array_equal((x * x).value, [[9.0]])
        npt.assert_array_equal(ad.square(x).value, [[9.0]])

    def test_softplus_zero_is_ln2(self):
        assert ad.softplus(leaf([[0.0]])).item() == pytest.approx(math.log(2), abs=1e-15)

    @pytest.mark.parametrize("c", [-1e3, 0.0, 7.5, 1e3])
    def test_softmax_of_constant_is_uniform(self, c):
        out = ad.softmax(leaf([[c, c, c]]), axis=1)
        npt.assert_allclose(out.value, [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)

    def test_softmax_mask_zeroes_padding(self):
        out = ad.softmax(leaf([[1.0, 2.0], [3.0, 4.0]]), axis=0, mask=np.array([[1, 1], [1, 0]]))
        npt.assert_allclose(out.value[:, 1], [1.0, 0.0])
        assert out.value[:, 0].sum() == pytest.approx(1.0)

    def test_sigmoid_is_stable_at_extremes(self):
        out = ad.sigmoid(leaf([[-1000.0, 0.0, 1000.0]])).value
        npt.assert_array_equal(out, [[0.0, 0.5, 1.0]])

    def test_distance_and_inner(self):
        a, b = leaf([[0.0, 0.0], [1.0, 2.0]]), leaf([[3.0, 4.0], [1.0, 2.0]])
        npt.assert_allclose(ad.distance(a, b).value, [[5.0], [0.0]])
        npt.assert_allclose(ad.inner(a, b).value, [[0.0], [5.0]])

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            ad.gather(leaf(np.zeros((3, 2))), np.array([0, 3]))

    def test_mismatched_shapes_are_errors(self):
        with pytest.raises(ad.ShapeError):
            leaf(np.zeros((2, 3))) + leaf(np.zeros((3, 2)))
        with pytest.raises(ad.ShapeError):
            leaf(np.zeros((2, 3))) + leaf(np.zeros((1, 3)))  # rows are never broadcast implicitly

    def test_scalar_broadcast_is_allowed(self):
        npt.assert_array_equal((leaf(np.ones((2, 2))) * 3.0).value, np.full((2, 2), 3.0))

    def test_rank_limit(self):
        with pytest.raises(ValueError):
            ad.Tensor(np.zeros((2, 2, 2)))


class TestBackward:
    def test_square_derivative(self):
        x = leaf([[3.0]])
        assert ad.backward(x * x)[x].item() == 6.0

    def test_softplus_derivative_at_zero(self):
        x = leaf([[0.0]])
        assert ad.backward(ad.softplus(x))[x].item() == pytest.approx(0.5, abs=1e-15)

    def test_root_must_be_scalar(self):
        x = leaf([[1.0, 2.0]])
        with pytest.raises(ValueError):
            ad.backward(x * 2.0)

    def test_unreached_leaf_gets_exact_zero(self):
        x, y = leaf([[1.0, 2.0]]), leaf([[5.0, 6.0]])
        grads = ad.backward(ad.sum_(x * x), wrt=[x, y])
        npt.assert_array_equal(grads[y], np.zeros((1, 2)))

    def test_constants_are_omitted(self):
        x = leaf([[2.0]])
        c = ad.Tensor([[4.0]])
        grads = ad.backward(ad.sum_(x * c))
        assert c not in grads and grads[x].item() == 4.0

    def test_gather_scatter_adds_repeats(self):
        table = leaf(np.arange(6.0).reshape(3, 2))
        grads = ad.backward(ad.sum_(ad.gather(table, np.array([0, 0, 2]))))
        npt.assert_array_equal(grads[table], [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_shared_subexpression_accumulates(self):
        x = leaf([[1.5]])
        y = x * x
        assert ad.backward(y + y)[x].item() == pytest.approx(6.0)

    def test_l2_norm_subgradient_at_origin(self):
        x = leaf([[0.0, 0.0]])
        npt.assert_array_equal(ad.backward(ad.sum_(ad.l2_norm(x)))[x], [[0.0, 0.0]])

    def test_no_grad_records_nothing(self):
        x = leaf([[1.0]])
        with ad.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf

    def test_repeated_runs_bit_identical(self):
        rng = np.random.default_rng(3)
        w = leaf(rng.normal(size=(4, 3)))
        x = ad.Tensor(rng.normal(size=(5, 4)))

        def run():
            return ad.backward(ad.sum_(ad.tanh(ad.matmul(x, w))))[w]

        npt.assert_array_equal(run(), run())


def _fd_check(f, params, tol=1e-4):
    errs = check_gradients(f, params)
    assert max(errs.values()) < tol, errs


class TestPrimitiveGradients:
    """Each primitive against central differences on random inputs."""

    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("op", ["sigmoid", "tanh", "softplus", "exp", "relu"])
    def test_unary(self, op, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(3, 4)) + 0.05)  # keep relu away from its kink
        w = ad.Tensor(rng.normal(size=(3, 4)))
        fn = getattr(ad, op)
        _fd_check(lambda: ad.sum_(fn(x) * w), {"x": x})

    @pytest.mark.parametrize("seed", range(3))
    def test_binary_and_structural(self, seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        c = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
        w = ad.Tensor(rng.normal(size=(3, 6)))

        def f():
            m = ad.matmul(a, b)
            q = ad.div(a, c) - a * c
            return ad.sum_(ad.concat([m, ad.mean(q, axis=1) + m[:, :1]], axis=1)[:, :3] * w[:, :3]) \
                + ad.sum_(ad.log(c)) + ad.sum_(ad.transpose(a) @ a)

        _fd_check(f, {"a": a, "b": b, "c": c})

    @pytest.mark.parametrize("seed", range(3))
    def test_softmax_masked(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(4, 3)))
        mask = np.ones((4, 3))
        mask[3, 0] = mask[2:, 2] = 0
        w = ad.Tensor(rng.normal(size=(4, 3)))
        _fd_check(lambda: ad.sum_(ad.softmax(x, axis=0, mask=mask) * w), {"x": x})

    @pytest.mark.parametrize("seed", range(3))
    def test_norms_and_gather(self, seed):
        rng = np.random.default_rng(seed)
        table = leaf(rng.normal(size=(5, 3)))
        other = leaf(rng.normal(size=(4, 3)))
        idx = np.array([4, 0, 0, 2])

        def f():
            g = ad.gather(table, idx)
            return ad.sum_(ad.distance(g, other)) + ad.sum_(ad.inner(g, other)) + ad.sum_squares(table) \
                + ad.sum_(ad.expand(ad.sum_(g, axis=1), 2, axis=1))

        _fd_check(f, {"table": table, "other": other})


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
    def test_softmax_is_a_distribution(self, x):
        out = ad.softmax(ad.Tensor(x * 40.0), axis=1).value
        assert (out >= 0).all()
        npt.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
    def test_sum_gradient_is_ones(self, x):
        t = leaf(x)
        npt.assert_array_equal(ad.backward(ad.sum_(t))[t], np.ones_like(x))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-30, 30), st.floats(-30, 30))
    def test_softplus_matches_log1p_exp(self, a, b):
        v = ad.softplus(ad.Tensor([[a, b]])).value
        npt.assert_allclose(v, np.logaddexp(0.0, [[a, b]]), rtol=1e-12)


class TestBatchNormOp:
    def test_zero_variance_feature_normalizes_to_zero(self):
        x = leaf([[1.0, 3.0], [1.0, 5.0], [1.0, 7.0]])
        out = ad.batch_norm(x, ad.Tensor(np.ones((1, 2))), ad.Tensor(np.zeros((1, 2))), 1e-5)
        npt.assert_array_equal(out.value[:, 0], 0.0)
        npt.assert_allclose(out.value[:, 1].mean(), 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_train_mode_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(5, 3)))
        gamma, beta = leaf(rng.uniform(0.5, 1.5, (1, 3))), leaf(rng.normal(size=(1, 3)))
        w = ad.Tensor(rng.normal(size=(5, 3)))
        _fd_check(lambda: ad.sum_(ad.batch_norm(x, gamma, beta, 1e-5) * w),
                  {"x": x, "gamma": gamma, "beta": beta})


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = leaf([[1.0, -2.0]], name="p")
        opt = ad.Adam({"p": p}, lr=0.1)
        opt.step({"p": np.zeros((1, 2))})
        npt.assert_array_equal(p.value, [[1.0, -2.0]])
        assert opt.step_count == 1

    def test_first_step_moves_by_lr(self):
        p = leaf([[0.0]], name="p")
        opt = ad.Adam({"p": p}, lr=0.1)
        opt.step({"p": np.ones((1, 1))})
        assert p.value.item() == pytest.approx(-0.1, abs=1e-8)

    def test_functional_matches_stateful(self):
        rng = np.random.default_rng(0)
        start = rng.normal(size=(2, 3))
        p = leaf(start.copy(), name="p")
        opt = ad.Adam({"p": p}, lr=0.01)
        params, state = {"p": start.copy()}, {}
        for _ in range(5):
            g = rng.normal(size=(2, 3))
            opt.step({"p": g})
            params, state = ad.adam_step(params, {"p": g}, state, lr=0.01)
        npt.assert_allclose(p.value, params["p"], rtol=0, atol=1e-15)
        assert state["step"] == 5

    def test_identical_params_stay_identical(self):
        a, b = leaf([[0.3, 0.7]]), leaf([[0.3, 0.7]])
        opt = ad.Adam({"a": a, "b": b}, lr=0.05)
        rng = np.random.default_rng(1)
        for _ in range(20):
            g = rng.normal(size=(1, 2))
            opt.step({"a": g, "b": g.copy()})
        npt.assert_array_equal(a.value, b.value)

    def test_moment_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.adam_step({"p": np.zeros(2)}, {"p": np.ones(2)}, {"step": 1, "m": {"p": np.zeros(3)},
                                                                   "v": {"p": np.zeros(3)}})
