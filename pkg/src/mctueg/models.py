"""Generator, task models and the perturbation that links them.

The generator maps an image to a same-shaped raw field; the protected image is
``clip(x + eps * tanh(field), 0, 1)``. Task models (surrogates during
generator training, targets during evaluation) are a tanh trunk plus a linear
task head, scored with the task's loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import ParamVector, make_layout
from .layers import Affine, Conv2d, Dense, Network, Tanh
from .tasksuite import (
    IMAGE_CLASS,
    IMAGE_REGRESSION,
    PIXEL_CLASS,
    PIXEL_REGRESSION,
    Batch,
    ImageDims,
    TaskSpec,
)


class ShapeMismatch(ValueError):
    pass


class LabelKindMismatch(ValueError):
    pass


@dataclass(frozen=True)
class NoiseBudget:
    epsilon: float = 8 / 255

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in (0, 1]")


# ---------------------------------------------------------------- losses

def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _onehot(y, k):
    out = np.zeros((y.shape[0], k))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _ce(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    value = float(np.mean(logsum - z[np.arange(n), y]))
    grad = (_softmax(logits) - _onehot(y, logits.shape[1])) / n
    return value, grad


def _brier(logits, y):
    n = logits.shape[0]
    p = _softmax(logits)
    diff = p - _onehot(y, logits.shape[1])
    value = float(np.sum(diff * diff) / n)
    dp = 2.0 * diff / n
    grad = p * (dp - np.sum(p * dp, axis=1, keepdims=True))
    return value, grad


def _squared_hinge(logits, y):
    n = logits.shape[0]
    rows = np.arange(n)
    m = 1.0 + logits - logits[rows, y][:, None]
    m[rows, y] = 0.0
    m = np.maximum(m, 0.0)
    value = float(np.sum(m * m) / n)
    grad = 2.0 * m / n
    grad[rows, y] = -grad.sum(axis=1)
    return value, grad


_CLASS_LOSSES = {"cross_entropy": _ce, "squared_error": _brier, "squared_hinge": _squared_hinge}
_PIXEL_CLASS_LOSSES = {
    "pixel_cross_entropy": _ce,
    "pixel_squared_error": _brier,
    "pixel_squared_hinge": _squared_hinge,
}


def head_width(task: TaskSpec, dims: ImageDims) -> int:
    hw = dims.height * dims.width
    if task.label_kind == IMAGE_CLASS:
        return task.out_dim
    if task.label_kind == PIXEL_CLASS:
        return task.out_dim * hw
    if task.label_kind == IMAGE_REGRESSION:
        return task.out_dim
    return hw


def _check_labels(task: TaskSpec, labels: np.ndarray, n: int, dims: ImageDims) -> None:
    ok = labels.shape[0] == n
    if task.label_kind in (IMAGE_CLASS, PIXEL_CLASS):
        ok = ok and labels.dtype.kind in "iu"
        if task.label_kind == IMAGE_CLASS:
            ok = ok and labels.ndim == 1
        else:
            ok = ok and labels.shape[1:] == (dims.height, dims.width)
        ok = ok and (labels.size == 0 or (labels.min() >= 0 and labels.max() < task.out_dim))
    elif task.label_kind == IMAGE_REGRESSION:
        ok = ok and labels.ndim == 2 and labels.shape[1] == task.out_dim and labels.dtype.kind == "f"
    else:
        ok = ok and labels.shape[1:] == (dims.height, dims.width) and labels.dtype.kind == "f"
    if not ok:
        raise LabelKindMismatch(
            f"labels of shape {labels.shape} / dtype {labels.dtype} do not fit task "
            f"{task.task_id!r} ({task.label_kind})"
        )


def task_loss(task: TaskSpec, out: np.ndarray, labels: np.ndarray, dims: ImageDims):
    """Weighted loss value and its gradient w.r.t. the flat head output ``out``."""
    value, grad = _unweighted_loss(task, out, labels, dims)
    w = task.loss_weight
    if w == 1.0:
        return value, grad
    return w * value, w * grad


def _unweighted_loss(task: TaskSpec, out: np.ndarray, labels: np.ndarray, dims: ImageDims):
    n = out.shape[0]
    _check_labels(task, labels, n, dims)
    if task.label_kind == IMAGE_CLASS:
        try:
            fn = _CLASS_LOSSES[task.loss_kind]
        except KeyError:
            raise LabelKindMismatch(f"loss {task.loss_kind!r} unsupported for {task.label_kind}") from None
        return fn(out, labels)
    if task.label_kind == PIXEL_CLASS:
        try:
            fn = _PIXEL_CLASS_LOSSES[task.loss_kind]
        except KeyError:
            raise LabelKindMismatch(f"loss {task.loss_kind!r} unsupported for {task.label_kind}") from None
        k = task.out_dim
        hw = dims.height * dims.width
        logits = out.reshape(n, k, hw).transpose(0, 2, 1).reshape(n * hw, k)
        value, g = fn(logits, labels.reshape(n * hw))
        return value, g.reshape(n, hw, k).transpose(0, 2, 1).reshape(n, k * hw)
    if task.loss_kind != "squared_error":
        raise LabelKindMismatch(f"loss {task.loss_kind!r} unsupported for {task.label_kind}")
    target = labels.reshape(n, -1)
    diff = out - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def predict(task: TaskSpec, out: np.ndarray, dims: ImageDims) -> np.ndarray:
    n = out.shape[0]
    if task.label_kind == IMAGE_CLASS:
        return out.argmax(axis=1)
    if task.label_kind == PIXEL_CLASS:
        return out.reshape(n, task.out_dim, dims.height, dims.width).argmax(axis=1)
    if task.label_kind == IMAGE_REGRESSION:
        return out
    return out.reshape(n, dims.height, dims.width)


# ---------------------------------------------------------------- generator

@dataclass
class GeneratorModel:
    net: Network
    dims: ImageDims
    params: ParamVector

    def with_params(self, params: ParamVector) -> "GeneratorModel":
        return GeneratorModel(self.net, self.dims, params)


# pixels in [0, 1] are mapped to [-1, 1] before the first weight layer
INPUT_SHIFT = -0.5
INPUT_SCALE = 2.0


def build_generator(dims: ImageDims, hidden: int = 32, rng=None, scale: float = 1.0,
                    out_scale: float = 1.0, zero: bool = False) -> GeneratorModel:
    """Fully connected encoder-decoder over the flattened image."""
    net = Network(
        [Affine(INPUT_SHIFT, INPUT_SCALE), Dense(dims.size, hidden), Tanh(), Dense(hidden, dims.size)],
        "gen",
    )
    layout = make_layout(net.layout_entries())
    if zero:
        values = np.zeros(sum(int(np.prod(s)) for _, s in net.layout_entries()))
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        values = net.init_values(rng, scale, last_scale=out_scale)
    return GeneratorModel(net, dims, ParamVector(values, layout))


def _check_images(x: np.ndarray, dims: ImageDims) -> None:
    if x.ndim != 4 or x.shape[1:] != dims.shape:
        raise ShapeMismatch(f"expected images of shape (n, {dims.shape}), got {x.shape}")


def generator_forward(gen: GeneratorModel, x: np.ndarray, params: ParamVector | None = None):
    """Raw (pre-tanh) field with the same shape as ``x``."""
    _check_images(x, gen.dims)
    params = gen.params if params is None else params
    out, _ = gen.net.forward(params, x.reshape(x.shape[0], -1))
    return out.reshape(x.shape)


def apply_perturbation(x: np.ndarray, field: np.ndarray, budget: NoiseBudget) -> np.ndarray:
    if x.shape != field.shape:
        raise ShapeMismatch(f"image {x.shape} and field {field.shape} differ")
    return np.clip(x + budget.epsilon * np.tanh(field), 0.0, 1.0)


def protect(gen: GeneratorModel, x: np.ndarray, budget: NoiseBudget) -> np.ndarray:
    return apply_perturbation(x, generator_forward(gen, x), budget)


# ---------------------------------------------------------------- task models

@dataclass
class TaskModel:
    """Trunk + head for one task. ``params`` may hold more segments (a pool)."""

    task: TaskSpec
    dims: ImageDims
    trunk: Network
    head: Network
    params: ParamVector

    @property
    def task_id(self) -> str:
        return self.task.task_id

    def with_params(self, params: ParamVector) -> "TaskModel":
        return TaskModel(self.task, self.dims, self.trunk, self.head, params)

    def forward(self, images: np.ndarray, params: ParamVector | None = None):
        params = self.params if params is None else params
        flat = images.reshape(images.shape[0], -1)
        h, t1 = self.trunk.forward(params, flat)
        out, t2 = self.head.forward(params, h)
        return out, (t1, t2)

    def backward(self, tape, dout, grad_buf, params: ParamVector | None = None):
        params = self.params if params is None else params
        t1, t2 = tape
        dh = self.head.backward(params, t2, dout, grad_buf)
        return self.trunk.backward(params, t1, dh, grad_buf)

    def predict(self, images: np.ndarray) -> np.ndarray:
        out, _ = self.forward(images)
        return predict(self.task, out, self.dims)


SurrogateModel = TaskModel


def _trunk(dims: ImageDims, hidden: int, prefix: str, channels: int) -> Network:
    conv = Conv2d(dims.shape, channels, kernel=4, stride=2)
    return Network(
        [Affine(INPUT_SHIFT, INPUT_SCALE), conv, Tanh(), Dense(conv.n_out, hidden), Tanh()], prefix
    )


def _head(task: TaskSpec, dims: ImageDims, hidden: int, prefix: str) -> Network:
    return Network([Dense(hidden, head_width(task, dims))], prefix)


class SurrogatePool:
    """One surrogate per seen task; shared trunk by default, separate on request."""

    def __init__(self, tasks: Sequence[TaskSpec], dims: ImageDims, hidden: int = 32,
                 shared_trunk: bool = True, rng=None, params: ParamVector | None = None,
                 channels: int = 8):
        self.tasks = list(tasks)
        self.dims = dims
        self.hidden = hidden
        self.channels = channels
        self.shared_trunk = shared_trunk
        self.trunks = {}
        self.heads = {}
        entries = []
        if shared_trunk:
            trunk = _trunk(dims, hidden, "trunk", channels)
            entries += trunk.layout_entries()
        for t in self.tasks:
            if not shared_trunk:
                trunk = _trunk(dims, hidden, f"trunk.{t.task_id}", channels)
                entries += trunk.layout_entries()
            self.trunks[t.task_id] = trunk
            head = _head(t, dims, hidden, f"head.{t.task_id}")
            self.heads[t.task_id] = head
            entries += head.layout_entries()
        self.layout = make_layout(entries)
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            chunks = []
            done = set()
            for t in self.tasks:
                trunk = self.trunks[t.task_id]
                if trunk.prefix not in done:
                    chunks.append((trunk.prefix, trunk.init_values(rng)))
                    done.add(trunk.prefix)
                chunks.append((f"head.{t.task_id}", self.heads[t.task_id].init_values(rng)))
            values = _assemble(entries, dict(chunks))
            params = ParamVector(values, self.layout)
        elif params.layout != self.layout:
            raise ShapeMismatch("parameter layout does not match the pool architecture")
        self.params = params

    def surrogate(self, task_id: str) -> TaskModel:
        for t in self.tasks:
            if t.task_id == task_id:
                return TaskModel(t, self.dims, self.trunks[task_id], self.heads[task_id], self.params)
        raise KeyError(task_id)

    def with_params(self, params: ParamVector) -> "SurrogatePool":
        return SurrogatePool(self.tasks, self.dims, self.hidden, self.shared_trunk,
                             params=params, channels=self.channels)

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]


def _assemble(entries, chunks: dict) -> np.ndarray:
    """Concatenate per-network init vectors in layout order."""
    out = []
    used = set()
    for name, _ in entries:
        prefix = name.rsplit(".", 2)[0]
        if prefix in used:
            continue
        used.add(prefix)
        out.append(chunks[prefix])
    return np.concatenate(out)


def build_target(task: TaskSpec, dims: ImageDims, hidden: int = 64, rng=None,
                 channels: int = 12) -> TaskModel:
    trunk = _trunk(dims, hidden, "target.trunk", channels)
    head = _head(task, dims, hidden, "target.head")
    layout = make_layout(trunk.layout_entries() + head.layout_entries())
    rng = np.random.default_rng(0) if rng is None else rng
    values = np.concatenate([trunk.init_values(rng), head.init_values(rng)])
    return TaskModel(task, dims, trunk, head, ParamVector(values, layout))


def _unpack(batch, task_id: str):
    if isinstance(batch, Batch):
        return batch.for_task(task_id)
    return batch


def surrogate_loss(surr: TaskModel, xu: np.ndarray, labels: np.ndarray) -> float:
    _check_images(xu, surr.dims)
    out, _ = surr.forward(xu)
    value, _ = task_loss(surr.task, out, labels, surr.dims)
    return value


# ---------------------------------------------------------------- objectives

class GeneratorObjective:
    """Task loss of a frozen task model on protected images, as a function of
    the generator parameters."""

    def __init__(self, gen: GeneratorModel, model: TaskModel, budget: NoiseBudget):
        self.gen = gen
        self.model = model
        self.budget = budget
        self.kind = model.task.loss_kind
        self.task_id = model.task_id

    def value_and_grad(self, params: ParamVector, batch):
        x, labels = _unpack(batch, self.task_id)
        _check_images(x, self.gen.dims)
        n = x.shape[0]
        flat = x.reshape(n, -1)
        field, gtape = self.gen.net.forward(params, flat)
        th = np.tanh(field)
        raw = flat + self.budget.epsilon * th
        xu = np.clip(raw, 0.0, 1.0)
        out, mtape = self.model.forward(xu)
        value, dout = task_loss(self.model.task, out, labels, self.model.dims)
        dxu = self.model.backward(mtape, dout, None)
        inside = (raw >= 0.0) & (raw <= 1.0)
        dfield = dxu * inside * (self.budget.epsilon * (1.0 - th * th))
        grad = np.zeros(len(params))
        self.gen.net.backward(params, gtape, dfield, grad)
        return value, ParamVector(grad, params.layout, check=False)

    def value(self, params: ParamVector, batch) -> float:
        x, labels = _unpack(batch, self.task_id)
        n = x.shape[0]
        flat = x.reshape(n, -1)
        field, _ = self.gen.net.forward(params, flat)
        xu = np.clip(flat + self.budget.epsilon * np.tanh(field), 0.0, 1.0)
        out, _ = self.model.forward(xu)
        return task_loss(self.model.task, out, labels, self.model.dims)[0]


class TaskObjective:
    """Task loss as a function of the task-model parameters (images fixed)."""

    def __init__(self, model: TaskModel):
        self.model = model
        self.kind = model.task.loss_kind
        self.task_id = model.task_id

    def value_and_grad(self, params: ParamVector, batch):
        x, labels = _unpack(batch, self.task_id)
        _check_images(x, self.model.dims)
        out, tape = self.model.forward(x, params)
        value, dout = task_loss(self.model.task, out, labels, self.model.dims)
        grad = np.zeros(len(params))
        h_tape, head_tape = tape
        dh = self.model.head.backward(params, head_tape, dout, grad)
        # first trunk layer's input gradient is never needed
        self.model.trunk.backward(params, h_tape, dh, grad)
        return value, ParamVector(grad, params.layout, check=False)

    def value(self, params: ParamVector, batch) -> float:
        x, labels = _unpack(batch, self.task_id)
        out, _ = self.model.forward(x, params)
        return task_loss(self.model.task, out, labels, self.model.dims)[0]
