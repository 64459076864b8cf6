import math
import warnings

import numpy as np
import pytest

from reidlab import autodiff as ad
from reidlab.autodiff import (ShapeError, Tensor, backward, build_op,
                              finite_diff_check)
from reidlab.gradcheck import default_suite, run_suite


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestForwardValues:
    def test_softplus_at_zero(self):
        out = ad.softplus(leaf([0.0]))
        assert out.values[0] == pytest.approx(math.log(2.0), abs=1e-12)

    def test_l2_normalize_three_four_five(self):
        out = ad.l2_normalize(leaf([3.0, 4.0]))
        np.testing.assert_allclose(out.values, [0.6, 0.8], atol=1e-15)

    def test_relu(self):
        out = ad.relu(leaf([-1.0, 2.0]))
        np.testing.assert_array_equal(out.values, [0.0, 2.0])

    def test_softplus_positive_and_asymptotic(self):
        xs = np.linspace(-50.0, 50.0, 201)
        vals = ad.softplus(leaf(xs)).values
        assert (vals > 0).all()
        assert abs(ad.softplus(leaf([50.0])).values[0] - 50.0) < 1e-12
        assert abs(ad.softplus(leaf([-50.0])).values[0]) < 1e-12

    def test_l2_normalize_unit_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = leaf(rng.uniform(-5, 5, (4, 7)))
            norms = np.linalg.norm(ad.l2_normalize(x, axis=1).values, axis=1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_l2_normalize_zero_vector_warns_and_returns_zero(self):
        with pytest.warns(RuntimeWarning):
            out = ad.l2_normalize(leaf([[0.0, 0.0], [3.0, 4.0]]), axis=1)
        np.testing.assert_array_equal(out.values[0], [0.0, 0.0])
        np.testing.assert_allclose(out.values[1], [0.6, 0.8])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = ad.softmax(leaf(rng.uniform(-30, 30, (5, 9))), axis=1)
        np.testing.assert_allclose(out.values.sum(axis=1), 1.0, atol=1e-12)


class TestBackward:
    def test_square_sum_gradient(self):
        x = leaf([1.0, 2.0])
        out = ad.tensor_sum(ad.multiply(x, x))
        backward(out)
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-15)

    def test_softplus_gradient_at_zero(self):
        x = leaf([0.0])
        backward(ad.softplus(x))
        assert x.grad[0] == pytest.approx(0.5, abs=1e-15)

    def test_non_scalar_root_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ValueError, match="scalar"):
            backward(ad.multiply(x, x))

    def test_fanout_accumulates_both_consumers(self):
        # leaf feeds two consumers; d/dx [sum(x*x) + sum(3x)] = 2x + 3
        x = leaf([1.0, -2.0, 0.5])
        out = ad.tensor_sum(ad.multiply(x, x)) + ad.tensor_sum(ad.multiply(x, 3.0))
        backward(out)
        np.testing.assert_allclose(x.grad, 2.0 * x.values + 3.0, atol=1e-14)

    def test_grads_accumulate_across_calls_until_reset(self):
        x = leaf([1.0])
        backward(ad.multiply(x, 2.0).sum())
        backward(ad.multiply(x, 2.0).sum())
        assert x.grad[0] == pytest.approx(4.0)
        x.zero_grad()
        assert x.grad[0] == 0.0

    def test_l2_normalize_dot_constant_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        c = rng.uniform(-1, 1, 5)

        def f(x):
            return ad.tensor_sum(ad.multiply(ad.l2_normalize(x), c))

        x = leaf(rng.uniform(0.5, 1.5, 5))
        report = finite_diff_check(f, [x], h=1e-5, tol=1e-4)
        assert report.passed, report

    def test_backward_returns_leaf_grad_map(self):
        x = leaf([2.0])
        y = leaf([3.0])
        grads = backward(ad.multiply(x, y).sum())
        assert grads[id(x)][0] == pytest.approx(3.0)
        assert grads[id(y)][0] == pytest.approx(2.0)


class TestShapeErrors:
    def test_matmul_mismatch_names_kind_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))

    def test_add_mismatch(self):
        with pytest.raises(ShapeError, match="add"):
            ad.add(leaf(np.ones((2, 3))), leaf(np.ones((4, 5))))

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError, match="concat"):
            ad.concat([leaf(np.ones((2, 3))), leaf(np.ones((2, 4)))], axis=0)


class TestBuildOp:
    def test_dispatch(self):
        out = build_op("add", [leaf([1.0]), leaf([2.0])])
        assert out.values[0] == 3.0

    def test_attrs_forwarded(self):
        out = build_op("sum", [leaf(np.ones((2, 3)))], {"axis": 1})
        np.testing.assert_array_equal(out.values, [3.0, 3.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown op kind"):
            build_op("convolve", [])


class TestFiniteDiffCheck:
    def test_constant_function_zero_error(self):
        x = leaf([1.0, 2.0])

        def f(t):
            return ad.tensor_sum(ad.multiply(t, 0.0))

        report = finite_diff_check(f, [x])
        assert report.passed
        assert report.max_rel_error == 0.0

    def test_nan_reports_failing_coordinate(self):
        x = leaf([0.5])

        def f(t):
            return ad.tensor_sum(ad.log(t + (-0.5)))  # log(0) at base point

        report = finite_diff_check(f, [x])
        assert not report.passed
        assert "non-finite" in report.note

    def test_rejects_nonpositive_h(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda t: t.sum(), [leaf([1.0])], h=0.0)


def test_registered_op_suite_ten_seeds():
    """Every registered operator passes the finite-difference check at
    tol 1e-4, h 1e-5, over ten seeds."""
    op_cases = [c for c in default_suite() if c.name.startswith("op.")]
    assert len(op_cases) >= 20
    results = run_suite(op_cases, seeds=range(10))
    failed = [r for r in results if not r["passed"]]
    assert not failed, failed
