import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mctueg.diffcore import (
    DegenerateVector,
    LayoutMismatch,
    LinearLoss,
    NonFiniteLoss,
    ParamVector,
    QuadraticLoss,
    ScaledLoss,
    finite_diff_check,
    gradient,
    hvp,
    make_layout,
    scalar_vector,
)
from mctueg.selftest import ToyMLPLoss, toy_instance


def test_layout_covers_values():
    layout = make_layout([("a", (2, 3)), ("b", (4,))])
    p = ParamVector(np.arange(10.0), layout)
    assert p.view("a").shape == (2, 3)
    assert p.view("b").tolist() == [6.0, 7.0, 8.0, 9.0]
    with pytest.raises(LayoutMismatch):
        ParamVector(np.zeros(9), layout)


def test_param_vector_rejects_nonfinite():
    with pytest.raises(NonFiniteLoss):
        scalar_vector([1.0, np.nan])


def test_mismatched_layouts_do_not_mix():
    a = ParamVector(np.zeros(2), make_layout([("x", (2,))]))
    b = ParamVector(np.zeros(2), make_layout([("y", (2,))]))
    with pytest.raises(LayoutMismatch):
        a + b


def test_quadratic_gradient():
    _, g = gradient(QuadraticLoss([[2.0]]), scalar_vector([1.0]))
    assert g.values[0] == 2.0


def test_stationary_point_has_zero_gradient():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -1.0])
    loss = QuadraticLoss(A, b)
    _, g = gradient(loss, scalar_vector(np.linalg.solve(A, b)))
    assert np.abs(g.values).max() <= 1e-12


def test_nonfinite_loss_raises():
    class Bad:
        def value_and_grad(self, p, batch=None):
            return float("nan"), p.zeros_like()

    with pytest.raises(NonFiniteLoss):
        gradient(Bad(), scalar_vector([1.0]))


@pytest.mark.parametrize("seed", range(10))
def test_toy_mlp_gradient_matches_differences(seed):
    loss, p, b = toy_instance(seed)
    report = finite_diff_check(loss, p, b, tol=1e-6)
    assert report.passed, report.max_rel_error


def test_relu_mlp_gradient_matches_differences():
    _, p, b = toy_instance(3)
    relu = ToyMLPLoss((4, 6, 3), activation="relu")
    assert finite_diff_check(relu, p, b, tol=1e-5).passed


def test_linear_loss_check_is_tight():
    loss = LinearLoss([1.0, -2.0, 3.5])
    assert finite_diff_check(loss, scalar_vector([0.3, 0.1, -4.0]), tol=1e-9).passed


def test_corrupted_gradient_fails_check():
    loss, p, b = toy_instance(0)

    class Corrupt:
        def value_and_grad(self, params, batch):
            v, g = loss.value_and_grad(params, batch)
            vals = g.values.copy()
            vals[int(np.argmax(np.abs(vals)))] *= 2.0
            return v, ParamVector(vals, g.layout)

        def value(self, params, batch):
            return loss.value(params, batch)

    assert not finite_diff_check(Corrupt(), p, b, tol=1e-5).passed


def test_hvp_diagonal_quadratic():
    loss = QuadraticLoss.diagonal([1.0, 5.0])
    out = hvp(loss, scalar_vector([0.3, -0.7]), scalar_vector([0.0, 1.0]))
    np.testing.assert_allclose(out.values, [0.0, 5.0], atol=1e-8)


@given(st.floats(-50, 50), st.floats(0.1, 10))
@settings(max_examples=30, deadline=None)
def test_hvp_constant_hessian(theta, a):
    out = hvp(QuadraticLoss([[a]]), scalar_vector([theta]), scalar_vector([1.0]))
    assert out.values[0] == pytest.approx(a, rel=1e-8)


@given(st.floats(1e-3, 1e3))
@settings(max_examples=20, deadline=None)
def test_hvp_is_linear_in_probe(c):
    loss, p, b = toy_instance(1)
    v = p.with_values(np.random.default_rng(0).standard_normal(len(p)))
    base = hvp(loss, p, v, b)
    scaled = hvp(loss, p, v * c, b)
    np.testing.assert_allclose(scaled.values, c * base.values, rtol=1e-8, atol=1e-12 * c)


def test_hvp_symmetry():
    loss, p, b = toy_instance(5)
    rng = np.random.default_rng(1)
    u = p.with_values(rng.standard_normal(len(p)))
    v = p.with_values(rng.standard_normal(len(p)))
    assert v.dot(hvp(loss, p, u, b)) == pytest.approx(u.dot(hvp(loss, p, v, b)), rel=1e-4)


def test_hvp_rejects_zero_probe():
    with pytest.raises(DegenerateVector):
        hvp(QuadraticLoss([[1.0]]), scalar_vector([1.0]), scalar_vector([0.0]))


def test_scaled_loss_scales_hvp():
    loss, p, b = toy_instance(2)
    v = p.with_values(np.ones(len(p)))
    np.testing.assert_allclose(hvp(ScaledLoss(loss, 3.0), p, v, b).values,
                               3.0 * hvp(loss, p, v, b).values, rtol=1e-7, atol=1e-12)


def test_gradient_is_deterministic():
    loss, p, b = toy_instance(4)
    v1, g1 = gradient(loss, p, b)
    v2, g2 = gradient(loss, p, b)
    assert v1 == v2 and np.array_equal(g1.values, g2.values)
