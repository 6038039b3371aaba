"""Flat parameter vectors, loss protocol, gradients and Hessian-vector products.

Everything here is float64. Gradients come from the layer-wise reverse pass in
:mod:`mctueg.layers`; Hessian-vector products are central differences of those
exact gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Protocol, Sequence, runtime_checkable

import numpy as np


class NonFiniteLoss(FloatingPointError):
    pass


class DegenerateVector(ValueError):
    pass


class LayoutMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def length(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


Layout = tuple[Segment, ...]


def make_layout(entries: Sequence[tuple[str, tuple[int, ...]]]) -> Layout:
    segs = []
    offset = 0
    seen = set()
    for name, shape in entries:
        if name in seen:
            raise ValueError(f"duplicate segment {name!r}")
        seen.add(name)
        seg = Segment(name, offset, tuple(int(s) for s in shape))
        segs.append(seg)
        offset += seg.length
    return tuple(segs)


def layout_size(layout: Layout) -> int:
    if not layout:
        return 0
    last = layout[-1]
    return last.offset + last.length


class ParamVector:
    """Flat float64 vector with a named segment table.

    Arithmetic returns new vectors; the underlying array is never mutated by
    this class. Gradients use the same type (``GradVector`` is an alias).
    """

    __slots__ = ("values", "layout", "_index")

    def __init__(self, values, layout: Layout, check: bool = True):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("ParamVector values must be 1-D")
        if check:
            if values.shape[0] != layout_size(layout):
                raise LayoutMismatch(
                    f"values have length {values.shape[0]}, layout covers {layout_size(layout)}"
                )
            pos = 0
            for seg in layout:
                if seg.offset != pos:
                    raise LayoutMismatch(f"segment {seg.name!r} leaves a gap or overlap")
                pos += seg.length
            if not np.all(np.isfinite(values)):
                raise NonFiniteLoss("ParamVector entries must be finite")
        self.values = values
        self.layout = layout
        self._index = None

    # construction helpers
    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout_size(layout)), layout)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout, check=False)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout, check=False)

    # segment access
    def segment(self, name: str) -> Segment:
        if self._index is None:
            self._index = {s.name: s for s in self.layout}
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"no segment named {name!r}") from None

    def view(self, name: str) -> np.ndarray:
        seg = self.segment(name)
        return self.values[seg.offset:seg.offset + seg.length].reshape(seg.shape)

    def names(self) -> list[str]:
        return [s.name for s in self.layout]

    # algebra
    def _check(self, other: "ParamVector") -> None:
        if not isinstance(other, ParamVector):
            raise TypeError(f"expected ParamVector, got {type(other).__name__}")
        if other.layout != self.layout:
            raise LayoutMismatch("vectors have different segment layouts")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, c: float) -> "ParamVector":
        return ParamVector(self.values * float(c), self.layout)

    __rmul__ = __mul__

    def __truediv__(self, c: float) -> "ParamVector":
        return ParamVector(self.values / float(c), self.layout)

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.values, self.layout, check=False)

    def axpy(self, a: float, x: "ParamVector") -> "ParamVector":
        """Return ``self + a * x``."""
        self._check(x)
        return ParamVector(self.values + float(a) * x.values, self.layout)

    def dot(self, other: "ParamVector") -> float:
        self._check(other)
        return float(self.values @ other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None  # mutable ndarray inside

    def __repr__(self) -> str:
        return f"ParamVector(n={len(self)}, segments={len(self.layout)}, norm={self.norm():.4g})"


GradVector = ParamVector


def scalar_vector(values) -> ParamVector:
    """Single-segment vector, handy for analytic toy losses."""
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    return ParamVector(values, make_layout([("theta", values.shape)]))


@runtime_checkable
class LossFn(Protocol):
    kind: str

    def value_and_grad(self, params: ParamVector, batch: Any) -> tuple[float, ParamVector]:
        ...


def _finite_or_raise(value: float, grad: ParamVector | None = None) -> None:
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss evaluated to {value}")
    if grad is not None and not np.all(np.isfinite(grad.values)):
        raise NonFiniteLoss("gradient has non-finite entries")


def loss_value(loss: LossFn, params: ParamVector, batch: Any) -> float:
    if hasattr(loss, "value"):
        value = float(loss.value(params, batch))
    else:
        value = float(loss.value_and_grad(params, batch)[0])
    _finite_or_raise(value)
    return value


def gradient(loss: LossFn, params: ParamVector, batch: Any = None) -> tuple[float, GradVector]:
    """Loss value and exact reverse-mode gradient at ``params``."""
    value, grad = loss.value_and_grad(params, batch)
    value = float(value)
    _finite_or_raise(value, grad)
    if grad.layout != params.layout:
        raise LayoutMismatch("gradient layout differs from params layout")
    return value, grad


def hvp(
    loss: LossFn,
    params: ParamVector,
    v: GradVector,
    batch: Any = None,
    fd_step: float = 1e-4,
) -> GradVector:
    """Hessian-vector product by central differences of exact gradients.

    The probe is normalised before differencing and the result scaled back by
    ``|v|``, so the step length ``fd_step * (1 + |params|)`` does not depend on
    the magnitude of ``v``.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    vnorm = v.norm()
    if vnorm == 0.0 or not np.isfinite(vnorm):
        raise DegenerateVector("hvp probe has zero (or non-finite) norm")
    unit = v.values / vnorm
    h = fd_step * (1.0 + params.norm())
    _, gp = gradient(loss, params.with_values(params.values + h * unit), batch)
    _, gm = gradient(loss, params.with_values(params.values - h * unit), batch)
    return ParamVector((gp.values - gm.values) * (vnorm / (2.0 * h)), params.layout)


def exact_hvp(loss: LossFn, params: ParamVector, v: GradVector, batch: Any = None) -> GradVector:
    """Analytic Hessian-vector product, only for losses that provide one."""
    fn = getattr(loss, "hessian_vector", None)
    if fn is None:
        raise NotImplementedError(f"{type(loss).__name__} has no exact Hessian-vector product")
    return fn(params, v, batch)


@dataclass(frozen=True)
class CheckReport:
    max_rel_error: float
    worst_index: int
    n_checked: int
    tol: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


# Per-coordinate relative error uses this absolute floor in the denominator;
# it keeps coordinates whose true derivative is ~0 from dominating via
# finite-difference roundoff (about 1e-11 at step 1e-5).
REL_ERROR_FLOOR = 1e-6


def relative_errors(a: np.ndarray, b: np.ndarray, floor: float = REL_ERROR_FLOOR) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def central_differences(fn, x: np.ndarray, step: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    idx = np.arange(x.size) if coords is None else np.asarray(coords)
    out = np.empty(idx.size)
    work = x.copy()
    for k, i in enumerate(idx):
        orig = work[i]
        work[i] = orig + step
        fp = fn(work)
        work[i] = orig - step
        fm = fn(work)
        work[i] = orig
        out[k] = (fp - fm) / (2.0 * step)
    return out


def finite_diff_check(
    loss: LossFn,
    params: ParamVector,
    batch: Any = None,
    tol: float = 1e-5,
    step: float = 1e-5,
    coords=None,
) -> CheckReport:
    """Compare ``gradient`` against central differences coordinate by coordinate."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    _, grad = gradient(loss, params, batch)
    idx = np.arange(len(params)) if coords is None else np.asarray(coords)
    numeric = central_differences(
        lambda w: loss_value(loss, params.with_values(w), batch), params.values, step, idx
    )
    analytic = grad.values[idx]
    errs = relative_errors(analytic, numeric)
    worst = int(np.argmax(errs)) if errs.size else 0
    max_err = float(errs[worst]) if errs.size else 0.0
    return CheckReport(
        max_rel_error=max_err,
        worst_index=int(idx[worst]) if errs.size else -1,
        n_checked=int(idx.size),
        tol=tol,
        passed=bool(max_err <= tol),
        analytic=analytic,
        numeric=numeric,
    )


class QuadraticLoss:
    """``0.5 * theta^T A theta - b^T theta`` with an exact Hessian.

    Mostly useful for closed-form checks of the meta-gradient algebra.
    """

    kind = "quadratic"

    def __init__(self, hessian, linear=None, task_id: str | None = None):
        A = np.atleast_2d(np.asarray(hessian, dtype=np.float64))
        if A.shape[0] != A.shape[1]:
            raise ValueError("Hessian must be square")
        self.A = 0.5 * (A + A.T)
        self.b = np.zeros(A.shape[0]) if linear is None else np.asarray(linear, dtype=np.float64)
        self.task_id = task_id

    @classmethod
    def diagonal(cls, diag, task_id: str | None = None) -> "QuadraticLoss":
        return cls(np.diag(np.asarray(diag, dtype=np.float64)), task_id=task_id)

    def value(self, params: ParamVector, batch=None) -> float:
        th = params.values
        return float(0.5 * th @ self.A @ th - self.b @ th)

    def value_and_grad(self, params: ParamVector, batch=None):
        th = params.values
        g = self.A @ th - self.b
        return float(0.5 * th @ self.A @ th - self.b @ th), ParamVector(g, params.layout)

    def hessian_vector(self, params: ParamVector, v: ParamVector, batch=None) -> ParamVector:
        return ParamVector(self.A @ v.values, params.layout)


class LinearLoss:
    kind = "linear"

    def __init__(self, coeffs):
        self.c = np.asarray(coeffs, dtype=np.float64)

    def value_and_grad(self, params: ParamVector, batch=None):
        return float(self.c @ params.values), ParamVector(self.c.copy(), params.layout)

    def hessian_vector(self, params: ParamVector, v: ParamVector, batch=None) -> ParamVector:
        return params.zeros_like()


class ScaledLoss:
    """``c * loss``; used to check Hessian linearity."""

    def __init__(self, loss: LossFn, scale: float):
        self.inner = loss
        self.scale = float(scale)
        self.kind = getattr(loss, "kind", "scaled")
        self.task_id = getattr(loss, "task_id", None)

    def value_and_grad(self, params, batch=None):
        v, g = self.inner.value_and_grad(params, batch)
        return self.scale * v, g * self.scale
