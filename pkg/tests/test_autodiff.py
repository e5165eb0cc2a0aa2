"""Tensor engine: forward semantics, backward rules, gradient checking."""

import math

import numpy as np
import numpy.testing as npt
import pytest
import sympy as sp

from multiformer import autodiff as ad
from multiformer.autodiff import Tensor, backward, grad_check, zero_grads
from multiformer.exceptions import (
    ContractError,
    DeterminismError,
    NumericError,
    ShapeError,
)


def leaf(data, dtype=np.float64):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def fd_max_rel_err(build_loss, params, eps=1e-5):
    report = grad_check(build_loss, params, eps=eps)
    return report.max_rel_err


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


class TestMatmul:
    def test_identity(self):
        b = np.array([[3.0, 4.0], [5.0, 6.0]])
        out = ad.matmul(Tensor(np.eye(2)), Tensor(b))
        npt.assert_array_equal(out.data, b)

    def test_dot_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        npt.assert_array_equal(out.data, [[11.0]])

    def test_right_identity_exact(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 6))
        out = ad.matmul(Tensor(a), Tensor(np.eye(6)))
        npt.assert_array_equal(out.data, a)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(7)
        params = {"a": leaf(rng.normal(size=(3, 4)))}
        b = Tensor(rng.normal(size=(4, 2)))
        err = fd_max_rel_err(lambda p: ad.sum_all(ad.matmul(p["a"], b)), params)
        assert err < 1e-5


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


class TestConv2d:
    def test_one_by_one_filter_scales(self):
        x = Tensor(np.ones((3, 3, 1)))
        f = Tensor(np.full((1, 1, 1, 1), 2.0))
        out = ad.conv2d(x, f)
        npt.assert_array_equal(out.data, np.full((3, 3, 1), 2.0))

    def test_local_sum(self):
        x = Tensor(np.ones((4, 4, 1)))
        f = Tensor(np.ones((3, 3, 1, 1)))
        out = ad.conv2d(x, f, stride=1)
        npt.assert_array_equal(out.data, np.full((2, 2, 1), 9.0))

    def test_one_hot_filter_selects_channel(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(5, 5, 3))
        f = np.zeros((1, 1, 3, 1))
        f[0, 0, 1, 0] = 1.0
        out = ad.conv2d(Tensor(x), Tensor(f))
        npt.assert_array_equal(out.data[:, :, 0], x[:, :, 1])

    def test_filter_larger_than_input(self):
        with pytest.raises(ShapeError, match="larger than input"):
            ad.conv2d(Tensor(np.ones((2, 2, 1))), Tensor(np.ones((3, 3, 1, 1))))

    def test_stride_two_output_extents(self):
        out = ad.conv2d(Tensor(np.ones((7, 5, 2))), Tensor(np.ones((3, 3, 2, 4))), stride=2)
        assert out.shape == (3, 2, 4)

    def test_filter_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(5, 5, 2)))
        params = {"f": leaf(rng.normal(size=(3, 3, 2, 4)))}
        err = fd_max_rel_err(lambda p: ad.sum_all(ad.conv2d(x, p["f"])), params)
        assert err < 1e-5

    def test_input_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(17)
        params = {"x": leaf(rng.normal(size=(6, 6, 2)))}
        f = Tensor(rng.normal(size=(3, 3, 2, 3)))
        weights = Tensor(rng.normal(size=(2, 2, 3)))
        err = fd_max_rel_err(lambda p: ad.sum_all(ad.mul(ad.conv2d(p["x"], f, stride=2), weights)), params)
        assert err < 1e-5


# ---------------------------------------------------------------------------
# softmax / layer_norm / gelu
# ---------------------------------------------------------------------------


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0]), axis=0)
        npt.assert_allclose(out.data, [0.5, 0.5], atol=1e-12)

    def test_large_inputs_do_not_overflow(self):
        out = ad.softmax(Tensor([1000.0, 1000.0, 1000.0]), axis=0)
        npt.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)
        assert np.isfinite(out.data).all()

    def test_matches_exp_normalize_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        out = ad.softmax(Tensor(x), axis=0)
        npt.assert_allclose(out.data, expected, atol=1e-12)

    def test_rows_sum_to_one_f32(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.uniform(-50, 50, size=(4, 7)).astype(np.float32))
            out = ad.softmax(x, axis=1)
            npt.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_non_finite_input_rejected(self):
        with pytest.raises(NumericError):
            ad.softmax(Tensor([1.0, np.inf]), axis=0)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            ad.softmax(Tensor([1.0, 2.0]), axis=2)


class TestLayerNorm:
    def test_constant_input_collapses_to_beta(self):
        out = ad.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-6)
        npt.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_two_point_symmetry(self):
        out = ad.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        npt.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)

    def test_matches_direct_evaluation(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        gamma = np.full(4, 2.0)
        beta = np.ones(4)
        eps = 1e-6
        expected = (x - x.mean()) / np.sqrt(x.var() + eps) * gamma + beta
        out = ad.layer_norm(Tensor(x), Tensor(gamma), Tensor(beta), eps=eps)
        npt.assert_allclose(out.data, expected, atol=1e-10)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(23)
        params = {
            "x": leaf(rng.normal(size=(3, 4))),
            "gamma": leaf(rng.uniform(0.5, 1.5, size=4)),
            "beta": leaf(rng.normal(size=4)),
        }
        weights = Tensor(rng.normal(size=(3, 4)))
        err = fd_max_rel_err(
            lambda p: ad.sum_all(ad.mul(ad.layer_norm(p["x"], p["gamma"], p["beta"]), weights)), params
        )
        assert err < 1e-5

    def test_unit_moments_when_variance_dominates_eps(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(0.0, 3.0, size=(5, 16)).astype(np.float32))
            out = ad.layer_norm(x, Tensor(np.ones(16, np.float32)), Tensor(np.zeros(16, np.float32)))
            assert np.abs(out.data.mean(axis=-1)).max() < 1e-5
            npt.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-3)

    def test_zero_width_rejected(self):
        with pytest.raises(ShapeError):
            ad.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


class TestGelu:
    def test_zero(self):
        assert float(ad.gelu(Tensor([0.0])).data[0]) == 0.0

    def test_asymptote(self):
        npt.assert_allclose(float(ad.gelu(Tensor([10.0])).data[0]), 10.0, atol=1e-6)

    def test_matches_erf_oracle(self):
        import mpmath

        mpmath.mp.dps = 50
        expected = float(mpmath.mpf(1) * 0.5 * (1 + mpmath.erf(mpmath.mpf(1) / mpmath.sqrt(2))))
        out = float(ad.gelu(Tensor([1.0])).data[0])
        assert abs(out - expected) < 1e-9

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(29)
        params = {"x": leaf(rng.normal(size=(8,)))}
        err = fd_max_rel_err(lambda p: ad.sum_all(ad.gelu(p["x"])), params)
        assert err < 1e-5


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


class TestStructural:
    def test_concat_columns(self):
        out = ad.concat([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])], axis=1)
        npt.assert_array_equal(out.data, [[1.0, 3.0], [2.0, 4.0]])

    def test_concat_extent_mismatch(self):
        with pytest.raises(ShapeError):
            ad.concat([Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 3)))], axis=0)

    def test_reshape_round_trip(self):
        x = np.arange(6, dtype=np.float64).reshape(2, 3)
        flat = ad.reshape(Tensor(x), (6,))
        back = ad.reshape(flat, (3, 2))
        npt.assert_array_equal(back.data, x.reshape(3, 2))

    def test_reshape_count_mismatch(self):
        with pytest.raises(ShapeError):
            ad.reshape(Tensor(np.zeros((2, 3))), (7,))

    def test_mean_pool_spatial(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        out = ad.mean_pool_spatial(Tensor(x))
        npt.assert_allclose(out.data, [2.5])

    def test_narrow_out_of_range(self):
        with pytest.raises(ShapeError):
            ad.narrow(Tensor(np.zeros((2, 3))), 1, 2, 2)

    def test_structural_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(31)
        params = {"x": leaf(rng.normal(size=(3, 4)))}
        weights = Tensor(rng.normal(size=(2, 2)))

        def build(p):
            t = ad.transpose(p["x"])  # (4, 3)
            t = ad.narrow(t, 0, 1, 2)  # (2, 3)
            t = ad.narrow(t, 1, 0, 2)  # (2, 2)
            return ad.sum_all(ad.mul(t, weights))

        assert fd_max_rel_err(build, params) < 1e-5


# ---------------------------------------------------------------------------
# backward traversal
# ---------------------------------------------------------------------------


class TestBackward:
    def test_sum_of_squares(self):
        x = leaf([1.0, -2.0, 3.0])
        backward(ad.sum_all(ad.mul(x, x)))
        npt.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_fanout_accumulates(self):
        x = leaf([1.0, 2.0])
        backward(ad.sum_all(ad.add(x, x)))
        npt.assert_allclose(x.grad, [2.0, 2.0])

    def test_nested_fanout(self):
        x = leaf([1.5, -0.5])
        y = ad.add(x, x)
        z = ad.add(y, y)
        backward(ad.sum_all(z))
        npt.assert_allclose(x.grad, [4.0, 4.0])

    def test_each_rule_runs_once(self):
        x = leaf([1.0, 2.0])
        y = ad.mul(x, x)
        calls = []
        original = y._backward

        def counting(g):
            calls.append(1)
            return original(g)

        y._backward = counting
        backward(ad.sum_all(ad.add(y, y)))
        assert len(calls) == 1
        npt.assert_allclose(x.grad, [4.0, 8.0])

    def test_grad_accumulates_across_calls(self):
        x = leaf([1.0])
        backward(ad.sum_all(x))
        backward(ad.sum_all(x))
        npt.assert_allclose(x.grad, [2.0])
        zero_grads([x])
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            backward(ad.add(x, x))

    def test_shared_subexpressions_match_symbolic_oracle(self):
        symbols = sp.symbols("x0 x1 x2")
        for seed in range(25):
            rng = np.random.default_rng(seed)
            values = rng.normal(size=3)
            leaves = [leaf([v]) for v in values]
            nodes = list(leaves)
            exprs = list(symbols)
            for _ in range(int(rng.integers(3, 18))):
                i, j = rng.integers(0, len(nodes), size=2)
                if rng.integers(0, 2):
                    nodes.append(ad.add(nodes[i], nodes[j]))
                    exprs.append(exprs[i] + exprs[j])
                else:
                    nodes.append(ad.mul(nodes[i], nodes[j]))
                    exprs.append(exprs[i] * exprs[j])
            backward(ad.sum_all(nodes[-1]))
            subs = dict(zip(symbols, values))
            for s, x in zip(symbols, leaves):
                expected = float(sp.diff(exprs[-1], s).evalf(subs=subs))
                got = 0.0 if x.grad is None else float(x.grad[0])
                assert got == pytest.approx(expected, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------------------
# finite differences across every differentiable op
# ---------------------------------------------------------------------------


def _op_losses(rng):
    """One scalar loss per differentiable op, on small random shapes.

    Multiplicative inputs and probe weights stay off zero so no gradient
    entry cancels below finite-difference resolution.
    """

    def off_zero(*shape):
        return rng.uniform(0.5, 1.5, size=shape)

    w34 = Tensor(off_zero(3, 4))
    w333 = Tensor(off_zero(3, 3, 3))
    return {
        "matmul": (
            {"a": leaf(off_zero(3, 2)), "b": leaf(off_zero(2, 4))},
            lambda p: ad.sum_all(ad.mul(ad.matmul(p["a"], p["b"]), w34)),
        ),
        "conv2d": (
            {"x": leaf(off_zero(5, 5, 2)), "f": leaf(off_zero(3, 3, 2, 3))},
            lambda p: ad.sum_all(ad.mul(ad.conv2d(p["x"], p["f"]), w333)),
        ),
        "softmax": (
            {"x": leaf(rng.normal(size=(3, 4)))},
            lambda p: ad.sum_all(ad.mul(ad.softmax(p["x"], 1), w34)),
        ),
        "layer_norm": (
            {
                "x": leaf(rng.normal(size=(3, 4))),
                "g": leaf(off_zero(4)),
                "b": leaf(rng.normal(size=4)),
            },
            lambda p: ad.sum_all(ad.mul(ad.layer_norm(p["x"], p["g"], p["b"]), w34)),
        ),
        "gelu": (
            {"x": leaf(off_zero(3, 4))},
            lambda p: ad.sum_all(ad.mul(ad.gelu(p["x"]), w34)),
        ),
        "add_mul_scale": (
            {"x": leaf(off_zero(3, 4)), "y": leaf(off_zero(4))},
            lambda p: ad.sum_all(ad.scale(ad.mul(ad.add(p["x"], p["y"]), w34), 1.7)),
        ),
        "concat_narrow_transpose_reshape": (
            {"x": leaf(rng.normal(size=(2, 3))), "y": leaf(rng.normal(size=(2, 3)))},
            lambda p: ad.sum_all(
                ad.mul(
                    ad.reshape(ad.narrow(ad.transpose(ad.concat([p["x"], p["y"]], 0)), 1, 1, 2), (6,)),
                    Tensor(np.arange(1.0, 7.0)),
                )
            ),
        ),
        "mean_pool": (
            {"x": leaf(rng.normal(size=(4, 4, 3)))},
            lambda p, w=Tensor(off_zero(3)): ad.sum_all(ad.mul(ad.mean_pool_spatial(p["x"]), w)),
        ),
    }


@pytest.mark.parametrize("op", sorted(_op_losses(np.random.default_rng(0))))
def test_every_op_matches_finite_differences_100_seeds(op):
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        params, build = _op_losses(rng)[op]
        assert fd_max_rel_err(build, params) < 1e-5, f"{op} failed at seed {seed}"


# ---------------------------------------------------------------------------
# grad_check contract
# ---------------------------------------------------------------------------


class TestGradCheck:
    def test_closed_form_linear_case(self):
        rng = np.random.default_rng(37)
        params = {"a": leaf(rng.normal(size=(3, 4))), "b": leaf(rng.normal(size=(4, 2)))}
        report = grad_check(lambda p: ad.sum_all(ad.matmul(p["a"], p["b"])), params)
        assert report.max_rel_err < 1e-7

    def test_constant_function_passes(self):
        params = {"x": leaf([1.0, 2.0])}
        report = grad_check(lambda p: ad.sum_all(Tensor([0.0])), params)
        assert report.passes(1e-7)

    def test_layer_norm_near_zero_variance_stays_finite(self):
        params = {"x": leaf([2.0, 2.0 + 1e-9, 2.0])}
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        report = grad_check(lambda p: ad.sum_all(ad.layer_norm(p["x"], gamma, beta)), params, eps=1e-7)
        assert np.isfinite(report.max_rel_err)

    def test_nondeterministic_function_rejected(self):
        params = {"x": leaf([1.0])}
        state = {"n": 0}

        def noisy(p):
            state["n"] += 1
            return ad.scale(ad.sum_all(p["x"]), state["n"])

        with pytest.raises(DeterminismError):
            grad_check(noisy, params)

    def test_nonpositive_eps_rejected(self):
        with pytest.raises(ContractError):
            grad_check(lambda p: ad.sum_all(p["x"]), {"x": leaf([1.0])}, eps=0.0)
