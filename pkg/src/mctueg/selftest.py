"""Small seeded toy problems and the quick oracle suite behind ``mctueg selftest``."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .diffcore import (
    ParamVector,
    QuadraticLoss,
    central_differences,
    finite_diff_check,
    gradient,
    hvp,
    loss_value,
    make_layout,
    relative_errors,
    scalar_vector,
)
from .layers import mlp


class ToyMLPLoss:
    """Mean squared error of a tanh MLP; batch is ``(x, y)``."""

    kind = "squared_error"

    def __init__(self, sizes=(4, 6, 3), task_id: str | None = None, activation: str = "tanh"):
        self.net = mlp(list(sizes), "toy", activation)
        self.layout = make_layout(self.net.layout_entries())
        self.task_id = task_id

    def init(self, rng: np.random.Generator, scale: float = 1.0) -> ParamVector:
        vals = self.net.init_values(rng, scale)
        # nonzero biases so every coordinate carries a gradient
        return ParamVector(vals + 0.1 * rng.standard_normal(vals.size), self.layout)

    def value_and_grad(self, params: ParamVector, batch):
        x, y = batch
        out, tape = self.net.forward(params, x)
        diff = out - y
        grad = np.zeros(len(params))
        self.net.backward(params, tape, 2.0 * diff / diff.size, grad)
        return float(np.mean(diff * diff)), ParamVector(grad, params.layout, check=False)

    def value(self, params: ParamVector, batch) -> float:
        x, y = batch
        out, _ = self.net.forward(params, x)
        return float(np.mean((out - y) ** 2))


def toy_instance(seed: int, sizes=(4, 6, 3), n: int = 8, task_id: str | None = None):
    """Seeded (loss, params, batch) triple."""
    rng = np.random.default_rng(seed)
    loss = ToyMLPLoss(sizes, task_id)
    params = loss.init(rng)
    batch = (rng.standard_normal((n, sizes[0])), rng.standard_normal((n, sizes[-1])))
    return loss, params, batch


def composite_meta_gradient(loss_tr, loss_te, params: ParamVector, batch, alpha: float,
                            step: float = 1e-5) -> np.ndarray:
    """Central differences of ``theta -> L_te(theta - alpha * grad L_tr(theta))``."""

    def f(w):
        p = params.with_values(w)
        _, g = gradient(loss_tr, p, batch)
        return loss_value(loss_te, p.axpy(-alpha, g), batch)

    return central_differences(f, params.values, step)


def _checks():
    from .metascheme import flatness_ascent, flatness_gap, meta_test_feedback, meta_train_step
    from .models import NoiseBudget, apply_perturbation

    def gradients():
        worst = 0.0
        for seed in range(20):
            loss, p, b = toy_instance(seed)
            worst = max(worst, finite_diff_check(loss, p, b, tol=1e-5).max_rel_error)
        return worst <= 1e-5, f"max relative error {worst:.2e} over 20 toy MLPs"

    def symmetry():
        worst = 0.0
        for seed in range(20):
            loss, p, b = toy_instance(seed)
            rng = np.random.default_rng(seed + 1000)
            u = p.with_values(rng.standard_normal(len(p)))
            v = p.with_values(rng.standard_normal(len(p)))
            a, c = v.dot(hvp(loss, p, u, b)), u.dot(hvp(loss, p, v, b))
            worst = max(worst, float(relative_errors(np.array([a]), np.array([c]))[0]))
        return worst <= 1e-4, f"max asymmetry {worst:.2e}"

    def meta_closed_form():
        a, b, alpha = 2.0, 3.0, 0.1
        tr, te = QuadraticLoss([[a]], task_id="tr"), QuadraticLoss([[b]], task_id="te")
        th = scalar_vector([1.0])
        _, g, desc = meta_train_step(th, tr, None, alpha)
        got = float(meta_test_feedback(th, desc, g, tr, te, None, alpha).values[0])
        want = b * (1 - alpha * a) ** 2
        return abs(got - want) <= 1e-10, f"{got!r} vs {want!r}"

    def meta_composite():
        worst = 0.0
        for seed in range(10):
            tr, p, batch = toy_instance(seed, task_id="tr")
            # same network read against other targets stands in for another task
            y2 = np.random.default_rng(seed + 7).standard_normal(batch[1].shape)
            te = _Rebatch(ToyMLPLoss((4, 6, 3), task_id="te"), (batch[0], y2))
            _, g, desc = meta_train_step(p, tr, batch, 0.1)
            got = meta_test_feedback(p, desc, g, tr, te, batch, 0.1).values
            want = composite_meta_gradient(tr, te, p, batch, 0.1)
            worst = max(worst, float(relative_errors(got, want, 1e-5).max()))
        return worst <= 1e-4, f"max relative error {worst:.2e}"

    def gap_closed_form():
        loss = QuadraticLoss([[2.0]])
        th = scalar_vector([1.0])
        _, g = gradient(loss, th)
        gap, _ = flatness_gap(th, flatness_ascent(th, g, 0.1), loss, None)
        return abs(gap - 0.44) <= 1e-10, f"gap {float(gap)!r}"

    def budget():
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(1000, 100))
        field = rng.standard_normal(x.shape) * 50
        eps = NoiseBudget().epsilon
        dev = np.abs(apply_perturbation(x, field, NoiseBudget()) - x).max()
        return dev <= eps + 1e-12, f"max deviation {dev:.6f} (budget {eps:.6f})"

    return [
        ("gradient vs finite differences", gradients),
        ("hvp symmetry", symmetry),
        ("meta-test gradient closed form", meta_closed_form),
        ("meta-test gradient vs composite differences", meta_composite),
        ("ascent gap closed form", gap_closed_form),
        ("perturbation budget", budget),
    ]


class _Rebatch:
    """Evaluates ``loss`` on a fixed batch regardless of the batch passed in."""

    def __init__(self, loss, batch):
        self.loss = loss
        self.batch = batch
        self.kind = loss.kind
        self.task_id = loss.task_id

    def value_and_grad(self, params, batch=None):
        return self.loss.value_and_grad(params, self.batch)

    def value(self, params, batch=None):
        return self.loss.value(params, self.batch)


def run_selftest(report: Callable[[str], None] = print) -> int:
    failures = 0
    for name, fn in _checks():
        ok, detail = fn()
        failures += not ok
        report(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return failures
