"""Hessian diagnostics built on Hessian-vector products only.

``top_eigenvalue`` is plain power iteration. ``hessian_spectrum`` runs
stochastic Lanczos quadrature: each probe gives a small tridiagonal matrix
whose eigenvalues (Ritz values) and squared first eigenvector components
(weights) form a quadrature rule for the spectral density.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .diffcore import DegenerateVector, LossFn, ParamVector, exact_hvp, hvp


@dataclass(frozen=True)
class SpectrumEstimate:
    ritz_values: np.ndarray
    weights: np.ndarray
    probes: int
    lanczos_steps: int
    breakdown: bool = False

    def __post_init__(self):
        rv = np.asarray(self.ritz_values, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if rv.shape != w.shape:
            raise ValueError("ritz values and weights differ in length")
        if not np.all(np.isfinite(rv)):
            raise ValueError("non-finite Ritz value")
        order = np.argsort(rv, kind="stable")
        object.__setattr__(self, "ritz_values", rv[order])
        object.__setattr__(self, "weights", w[order])

    def to_text(self) -> str:
        lines = ["# ritz_value\tweight"]
        lines += [f"{r!r}\t{w!r}" for r, w in zip(self.ritz_values.tolist(), self.weights.tolist())]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _hvp_fn(loss, params, batch, fd_step, exact):
    if exact:
        return lambda v: exact_hvp(loss, params, v, batch)
    return lambda v: hvp(loss, params, v, batch, fd_step)


def _random_unit(rng: np.random.Generator, like: ParamVector) -> ParamVector:
    v = rng.standard_normal(len(like))
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DegenerateVector("probe collapsed to zero")
    return ParamVector(v / n, like.layout, check=False)


def top_eigenvalue(
    loss: LossFn,
    params: ParamVector,
    batch=None,
    iters: int = 50,
    rng: np.random.Generator | None = None,
    fd_step: float = 1e-4,
    exact: bool = False,
) -> float:
    """Largest algebraic Hessian eigenvalue by power iteration.

    Plain power iteration finds the eigenvalue of largest magnitude. When that
    one is negative, a second pass on ``H - lam*I`` (whose spectrum is then
    non-negative) recovers the top of the spectrum. Both passes use ``iters``
    steps and share the same starting vector.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    H = _hvp_fn(loss, params, batch, fd_step, exact)
    v0 = _random_unit(rng, params)
    lam = _power(H, v0, iters)
    if lam < 0.0:
        try:
            lam += _power(lambda v: H(v).axpy(-lam, v), v0, iters)
        except DegenerateVector:
            pass  # H is lam*I on the probed subspace

    return float(lam)


def _power(matvec, v: ParamVector, iters: int) -> float:
    lam = 0.0
    for _ in range(iters):
        hv = matvec(v)
        lam = v.dot(hv)
        n = hv.norm()
        if n == 0.0:
            raise DegenerateVector("power iterate collapsed to zero")
        v = hv / n
    return lam


def lanczos(matvec, v0: np.ndarray, steps: int, tol: float = 1e-10):
    """Lanczos with full reorthogonalization.

    Returns (alphas, betas, breakdown). Stops early when the next residual norm
    falls below ``tol`` times the largest diagonal magnitude seen so far; that
    happens legitimately once the Krylov space is exhausted.
    """
    n = v0.shape[0]
    steps = min(steps, n)
    Q = np.zeros((steps, n))
    alphas, betas = [], []
    q = v0 / np.linalg.norm(v0)
    breakdown = False
    for j in range(steps):
        Q[j] = q
        w = matvec(q)
        a = float(q @ w)
        alphas.append(a)
        w = w - Q[: j + 1].T @ (Q[: j + 1] @ w)
        # second pass keeps the basis orthogonal to working precision
        w = w - Q[: j + 1].T @ (Q[: j + 1] @ w)
        b = float(np.linalg.norm(w))
        if j == steps - 1:
            break
        scale = max(abs(x) for x in alphas) or 1.0
        if b <= tol * scale:
            breakdown = j == 0
            break
        betas.append(b)
        q = w / b
    return np.array(alphas), np.array(betas), breakdown


def hessian_spectrum(
    loss: LossFn,
    params: ParamVector,
    batch=None,
    lanczos_steps: int = 32,
    probes: int = 8,
    rng: np.random.Generator | None = None,
    fd_step: float = 1e-4,
    exact: bool = False,
) -> SpectrumEstimate:
    """Stochastic Lanczos quadrature estimate of the Hessian's spectral density.

    Probes are Rademacher vectors; each probe's weights sum to 1 and the final
    weights are the uniform average over probes. A probe whose Lanczos run
    breaks down at the first step yields a single Ritz value and sets the
    ``breakdown`` flag instead of raising.
    """
    if lanczos_steps < 2:
        raise ValueError("lanczos_steps must be >= 2")
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    H = _hvp_fn(loss, params, batch, fd_step, exact)
    layout = params.layout

    def matvec(x):
        return H(ParamVector(x, layout, check=False)).values

    ritz, weights = [], []
    flagged = False
    for _ in range(probes):
        v0 = rng.choice([-1.0, 1.0], size=len(params))
        a, b, broke = lanczos(matvec, v0, lanczos_steps)
        flagged |= broke
        if len(a) == 1:
            vals, first = a, np.ones(1)
        else:
            vals, vecs = eigh_tridiagonal(a, b)
            first = vecs[0] ** 2
        ritz.append(vals)
        weights.append(first / first.sum() / probes)
    return SpectrumEstimate(np.concatenate(ritz), np.concatenate(weights), probes, lanczos_steps, flagged)


def left_mass(spec: SpectrumEstimate, tau: float) -> float:
    """Fraction of spectral weight at Ritz values <= tau."""
    if not np.isfinite(tau):
        raise ValueError("tau must be finite")
    total = spec.weights.sum()
    if total == 0.0:
        return 0.0
    return float(min(1.0, spec.weights[spec.ritz_values <= tau].sum() / total))


def median_ritz(spec: SpectrumEstimate) -> float:
    """Weighted median of the spectral density."""
    cum = np.cumsum(spec.weights) / spec.weights.sum()
    return float(spec.ritz_values[int(np.searchsorted(cum, 0.5))])


def read_spectrum(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, comments="#", delimiter="\t", ndmin=2)
    return data[:, 0], data[:, 1]
