import numpy as np
import pytest

from mctueg.diffcore import DegenerateVector, QuadraticLoss, ScaledLoss, scalar_vector
from mctueg.flatness import SpectrumEstimate, hessian_spectrum, left_mass, read_spectrum, top_eigenvalue
from mctueg.selftest import toy_instance


def test_top_eigenvalue_diagonal():
    lam = top_eigenvalue(QuadraticLoss.diagonal([1.0, 5.0]), scalar_vector([0.2, 0.4]), iters=200)
    assert lam == pytest.approx(5.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_top_eigenvalue_isotropic(seed):
    lam = top_eigenvalue(QuadraticLoss(2.5 * np.eye(6)), scalar_vector(np.ones(6)), iters=1,
                         rng=np.random.default_rng(seed))
    assert lam == pytest.approx(2.5, rel=1e-8)


def test_top_eigenvalue_scales_with_loss():
    loss, p, b = toy_instance(0)
    base = top_eigenvalue(loss, p, b, iters=30, rng=np.random.default_rng(0))
    scaled = top_eigenvalue(ScaledLoss(loss, 4.0), p, b, iters=30, rng=np.random.default_rng(0))
    assert scaled == pytest.approx(4.0 * base, rel=1e-8)


def test_top_eigenvalue_prefers_largest_not_dominant():
    lam = top_eigenvalue(QuadraticLoss.diagonal([-5.0, 1.0, 0.5]), scalar_vector([0.1, 0.2, 0.3]), iters=300)
    assert lam == pytest.approx(1.0, abs=1e-6)


def test_top_eigenvalue_negative_isotropic():
    lam = top_eigenvalue(QuadraticLoss(-2.0 * np.eye(3)), scalar_vector(np.ones(3)), iters=3)
    assert lam == pytest.approx(-2.0, rel=1e-8)


def test_top_eigenvalue_degenerate():
    with pytest.raises(DegenerateVector):
        top_eigenvalue(QuadraticLoss(np.zeros((2, 2))), scalar_vector([1.0, 1.0]), iters=3)


def test_spectrum_reproduces_eigenvalues():
    eig = np.linspace(0.5, 9.5, 10)
    spec = hessian_spectrum(QuadraticLoss.diagonal(eig), scalar_vector(np.zeros(10)), lanczos_steps=10,
                            probes=1, rng=np.random.default_rng(0))
    np.testing.assert_allclose(spec.ritz_values, eig, atol=1e-6)
    assert spec.weights.sum() == pytest.approx(1.0)


def test_identity_spectrum_single_value():
    spec = hessian_spectrum(QuadraticLoss(np.eye(5)), scalar_vector(np.zeros(5)), lanczos_steps=4, probes=3)
    np.testing.assert_allclose(spec.ritz_values, 1.0, atol=1e-10)
    assert spec.breakdown


def test_ritz_values_within_bounds():
    rng = np.random.default_rng(3)
    M = rng.standard_normal((12, 12))
    H = M @ M.T
    eig = np.linalg.eigvalsh(H)
    spec = hessian_spectrum(QuadraticLoss(H), scalar_vector(np.zeros(12)), lanczos_steps=6, probes=4, rng=rng)
    assert spec.ritz_values.min() >= eig.min() - 1e-6
    assert spec.ritz_values.max() <= eig.max() + 1e-6
    assert np.all(spec.weights >= 0)


def test_left_mass_bounds_and_two_dim_case():
    spec = hessian_spectrum(QuadraticLoss.diagonal([1.0, 5.0]), scalar_vector([0.0, 0.0]),
                            lanczos_steps=2, probes=1, rng=np.random.default_rng(0))
    assert left_mass(spec, 10.0) == 1.0
    assert left_mass(spec, 0.0) == 0.0
    # Rademacher probe puts equal weight on both eigen-directions
    assert left_mass(spec, 2.0) == pytest.approx(0.5, abs=1e-9)


def test_left_mass_reproducible():
    loss, p, b = toy_instance(2)
    a = hessian_spectrum(loss, p, b, 6, 3, np.random.default_rng(9))
    c = hessian_spectrum(loss, p, b, 6, 3, np.random.default_rng(9))
    assert left_mass(a, 0.01) == left_mass(c, 0.01)
    assert np.array_equal(a.ritz_values, c.ritz_values)


def test_spectrum_validation():
    with pytest.raises(ValueError):
        hessian_spectrum(QuadraticLoss(np.eye(2)), scalar_vector([0.0, 0.0]), lanczos_steps=1)
    with pytest.raises(ValueError):
        SpectrumEstimate(np.array([np.nan]), np.array([1.0]), 1, 2)


def test_spectrum_text_export(tmp_path):
    spec = SpectrumEstimate(np.array([3.0, 1.0]), np.array([0.25, 0.75]), 1, 2)
    spec.save(tmp_path / "s.tsv")
    r, w = read_spectrum(tmp_path / "s.tsv")
    assert r.tolist() == [1.0, 3.0] and w.tolist() == [0.75, 0.25]
