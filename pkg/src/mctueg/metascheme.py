"""Alternating generator/surrogate game with flat-minima-oriented meta training.

One generator iteration:

1. meta-train: gradient of the meta-train surrogate's loss and the simulated
   descent point ``theta - alpha * g``;
2. meta-test feedback: gradient, w.r.t. ``theta``, of a different task's loss at
   the simulated point (second order, through the descent step);
3. meta-flatness: ascent point ``theta + eta * g``, the loss gap there, its
   gradient, plus lambda-weighted running means of other tasks' past gap
   gradients;
4. actual update: ``theta -= beta * (g + g_meta_test + g_meta_flat)``.

Steps 2 and 3 only read shared inputs and can run side by side.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import RunConfig
from .diffcore import (
    GradVector,
    LayoutMismatch,
    LossFn,
    ParamVector,
    exact_hvp,
    gradient,
    hvp,
)
from .models import (
    GeneratorModel,
    GeneratorObjective,
    NoiseBudget,
    SurrogatePool,
    TaskObjective,
    build_generator,
    protect,
)
from .tasksuite import BadConfig, DatasetSplit, ImageDims, iter_epoch, make_suite


class SplitViolation(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 1e-4
    beta: float = 2e-5
    eta: float = 5e-4
    lam: float = 0.2
    epsilon: float = 8 / 255
    gen_epochs_per_cycle: int = 3
    surr_epochs_per_cycle: int = 1
    surr_lr: float = 1e-3

    def __post_init__(self):
        for name in ("alpha", "beta", "eta", "surr_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        NoiseBudget(self.epsilon)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Hyperparams":
        return cls(cfg.alpha, cfg.beta, cfg.eta, cfg.lam, cfg.epsilon,
                   cfg.gen_epochs_per_cycle, cfg.surr_epochs_per_cycle, cfg.surr_lr)


@dataclass(frozen=True)
class MetaSplit:
    meta_train: tuple[str, ...]
    meta_test: tuple[str, ...]


def split_tasks(seen: Iterable[str], rng: np.random.Generator) -> MetaSplit:
    """Uniformly random near-equal partition; with an odd count the extra task
    goes to the meta-train side."""
    ids = sorted(seen)
    if len(ids) < 2:
        raise BadConfig("need at least 2 seen tasks to split")
    perm = rng.permutation(len(ids))
    k = (len(ids) + 1) // 2
    return MetaSplit(tuple(ids[i] for i in perm[:k]), tuple(ids[i] for i in perm[k:]))


# ---------------------------------------------------------------- the four steps

def meta_train_step(params: ParamVector, loss: LossFn, batch, alpha: float):
    """Loss, gradient and the simulated descent point. ``params`` is not touched."""
    value, grad = gradient(loss, params, batch)
    return value, grad, params.axpy(-alpha, grad)


def meta_test_feedback(
    params: ParamVector,
    desc: ParamVector,
    grad_mtr: GradVector,
    loss_mtr: LossFn,
    loss_mte: LossFn,
    batch,
    alpha: float,
    fd_step: float = 1e-4,
    exact: bool = False,
    second_order: bool = True,
    return_loss: bool = False,
):
    """Gradient of ``L_mte(theta - alpha * grad L_mtr(theta))`` w.r.t. theta.

    By the chain rule this is ``(I - alpha * H_mtr(theta)) g'`` with ``g'`` the
    meta-test gradient at the descent point. ``second_order=False`` gives the
    ablation that uses ``grad L_mte(theta)`` instead.
    """
    t_tr = getattr(loss_mtr, "task_id", None)
    t_te = getattr(loss_mte, "task_id", None)
    if t_tr is not None and t_tr == t_te:
        raise SplitViolation(f"meta-train and meta-test share task {t_tr!r}")
    if not second_order:
        value, g = gradient(loss_mte, params, batch)
        return (value, g) if return_loss else g
    value, g_desc = gradient(loss_mte, desc, batch)
    if alpha == 0.0 or g_desc.norm() == 0.0:
        out = g_desc
    else:
        hv = exact_hvp(loss_mtr, params, g_desc, batch) if exact else hvp(
            loss_mtr, params, g_desc, batch, fd_step
        )
        out = g_desc.axpy(-alpha, hv)
    return (value, out) if return_loss else out


def flatness_ascent(params: ParamVector, grad_mtr: GradVector, eta: float) -> ParamVector:
    if eta <= 0:
        raise ValueError("eta must be positive")
    return params.axpy(eta, grad_mtr)


def flatness_gap(
    params: ParamVector,
    asc: ParamVector,
    loss_mtr: LossFn,
    batch,
    base: tuple[float, GradVector] | None = None,
    mode: str = "first_order",
    eta: float | None = None,
    fd_step: float = 1e-4,
    exact_hessian: bool = False,
):
    """Loss gap between the ascent point and ``params`` and its gradient.

    ``first_order`` holds the ascent direction fixed:
    ``grad L(asc) - grad L(theta)``. ``exact`` differentiates through it:
    ``(I + eta * H(theta)) grad L(asc) - grad L(theta)``.
    """
    if base is None:
        base = gradient(loss_mtr, params, batch)
    value, grad = base
    asc_value, asc_grad = gradient(loss_mtr, asc, batch)
    gap = asc_value - value
    if mode == "first_order":
        return gap, asc_grad - grad
    if mode != "exact":
        raise ValueError(f"unknown gap mode {mode!r}")
    if eta is None:
        raise ValueError("exact gap gradient needs eta")
    if asc_grad.norm() == 0.0:
        return gap, asc_grad - grad
    hv = exact_hvp(loss_mtr, params, asc_grad, batch) if exact_hessian else hvp(
        loss_mtr, params, asc_grad, batch, fd_step
    )
    return gap, asc_grad.axpy(eta, hv) - grad


class FlatnessCache:
    """Per-task running means of past gap gradients."""

    def __init__(self, size: int):
        self.size = int(size)
        self.means: dict[str, np.ndarray] = {}
        self.counts: dict[str, int] = {}
        self.phase = 0

    def count(self, task_id: str) -> int:
        return self.counts.get(task_id, 0)

    def mean(self, task_id: str) -> np.ndarray:
        if task_id not in self.means:
            return np.zeros(self.size)
        return self.means[task_id].copy()

    def active(self) -> list[str]:
        return sorted(self.means)

    def rest_sum(self, exclude: str) -> np.ndarray:
        total = np.zeros(self.size)
        # sorted order keeps the floating-point sum reproducible
        for t in sorted(self.means):
            if t != exclude:
                total += self.means[t]
        return total

    def update(self, task_id: str, signal: np.ndarray) -> None:
        signal = np.asarray(signal, dtype=np.float64)
        if signal.shape != (self.size,):
            raise LayoutMismatch("cache signal has the wrong length")
        n = self.counts.get(task_id, 0) + 1
        if n == 1:
            self.means[task_id] = signal.copy()
        else:
            m = self.means[task_id]
            m += (signal - m) / n
        self.counts[task_id] = n

    def reset(self) -> None:
        self.means.clear()
        self.counts.clear()
        self.phase += 1

    def snapshot(self) -> dict:
        return {
            "phase": self.phase,
            "tasks": {t: (self.counts[t], self.means[t].copy()) for t in sorted(self.means)},
        }

    @classmethod
    def restore(cls, size: int, snap: dict) -> "FlatnessCache":
        cache = cls(size)
        cache.phase = int(snap["phase"])
        for t, (n, m) in snap["tasks"].items():
            cache.counts[t] = int(n)
            cache.means[t] = np.array(m, dtype=np.float64)
        return cache


def flatness_feedback(
    gap_grad: GradVector,
    cache: FlatnessCache,
    current_task: str,
    lam: float,
    use_history: bool = True,
    rest_override: np.ndarray | None = None,
) -> GradVector:
    """Current gap gradient plus lambda times the other tasks' cached means.

    The cache is updated with ``gap_grad`` afterwards. ``rest_override`` swaps
    the cached sum for freshly recomputed signals (the naive variant).
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    out = gap_grad
    if use_history and lam != 0.0:
        rest = cache.rest_sum(current_task) if rest_override is None else rest_override
        out = ParamVector(gap_grad.values + lam * rest, gap_grad.layout)
    cache.update(current_task, gap_grad.values)
    return out


def actual_update(
    params: ParamVector,
    grad_mtr: GradVector,
    g_meta_test: GradVector | None,
    g_meta_flat: GradVector | None,
    beta: float,
) -> ParamVector:
    total = grad_mtr.values.copy()
    for g in (g_meta_test, g_meta_flat):
        if g is None:
            continue
        if g.layout != params.layout or grad_mtr.layout != params.layout:
            raise LayoutMismatch("feedback vectors do not share the generator layout")
        total += g.values
    if grad_mtr.layout != params.layout:
        raise LayoutMismatch("meta-train gradient does not share the generator layout")
    return ParamVector(params.values - beta * total, params.layout)


# ---------------------------------------------------------------- surrogates

def surrogate_update_epoch(
    pool: SurrogatePool,
    gen: GeneratorModel,
    data,
    lr: float,
    rng: np.random.Generator,
    budget: NoiseBudget,
    batch_size: int = 32,
) -> SurrogatePool:
    """One epoch of plain gradient descent; each iteration trains one randomly
    chosen surrogate on generator-protected images."""
    params = pool.params
    ids = pool.task_ids
    for batch in iter_epoch(data, batch_size, rng, ids):
        t = ids[int(rng.integers(len(ids)))]
        xu = protect(gen, batch.images, budget)
        if lr == 0.0:
            continue
        obj = TaskObjective(pool.surrogate(t))
        _, g = gradient(obj, params, (xu, batch.labels[t]))
        params = params.axpy(-lr, g)
    return pool.with_params(params)


# ---------------------------------------------------------------- training loop

@dataclass
class StepTrace:
    iteration: int
    cycle: int
    epoch: int
    mtr_task: str
    mte_task: str
    meta_train: tuple[str, ...]
    meta_test: tuple[str, ...]
    loss_mtr: float
    loss_mte: float | None
    loss_gap: float | None
    grad_norm_mtr: float
    grad_norm_meta_test: float | None
    grad_norm_meta_flat: float | None
    cache_phase: int

    def to_json(self) -> str:
        d = asdict(self)
        d["meta_train"] = list(self.meta_train)
        d["meta_test"] = list(self.meta_test)
        return json.dumps(d, sort_keys=True)


@dataclass
class IterationInfo:
    """Everything an observer may want to audit after one generator iteration."""

    trace: StepTrace
    params_before: ParamVector
    params_after: ParamVector
    batch: object
    grad_mtr: GradVector
    g_meta_test: GradVector | None
    gap_grad: GradVector | None
    g_meta_flat: GradVector | None
    cache: FlatnessCache
    first_after_reset: bool
    state: "TrainState"


@dataclass
class TrainState:
    gen: GeneratorModel
    pool: SurrogatePool
    cache: FlatnessCache
    rng: np.random.Generator
    cycle: int = 0
    iteration: int = 0
    warmed_up: bool = False


def build_suite(cfg: RunConfig) -> DatasetSplit:
    dims = ImageDims(cfg.channels, cfg.height, cfg.width)
    _, split = make_suite(cfg.data_seed, cfg.num_seen, cfg.num_unseen, dims, cfg.n_train, cfg.n_test)
    return split


def init_state(cfg: RunConfig, split: DatasetSplit) -> TrainState:
    gen = build_generator(
        split.dims, cfg.gen_hidden, np.random.default_rng([cfg.train_seed, 1]),
        scale=cfg.gen_init_scale, out_scale=cfg.gen_out_scale,
    )
    pool = SurrogatePool(
        split.seen, split.dims, cfg.surr_hidden, cfg.shared_trunk,
        rng=np.random.default_rng([cfg.train_seed, 2]), channels=cfg.surr_channels,
    )
    return TrainState(gen, pool, FlatnessCache(len(gen.params)), np.random.default_rng([cfg.train_seed, 3]))


def naive_rest_sum(state: TrainState, params: ParamVector, batch, budget: NoiseBudget,
                   current: str, eta: float, tasks: Sequence[str]) -> np.ndarray:
    """Recompute, at the current parameters, the gap gradient of each listed
    task other than ``current`` and sum them (fixed task order)."""
    total = np.zeros(len(params))
    for t in sorted(tasks):
        if t == current:
            continue
        obj = GeneratorObjective(state.gen, state.pool.surrogate(t), budget)
        base = gradient(obj, params, batch)
        asc = flatness_ascent(params, base[1], eta)
        _, g = flatness_gap(params, asc, obj, batch, base=base)
        total += g.values
    return total


def generator_iteration(cfg: RunConfig, state: TrainState, batch, msplit: MetaSplit,
                        budget: NoiseBudget, pool_exec: ThreadPoolExecutor | None = None):
    """Run the four steps once; returns (new params, trace pieces)."""
    rng = state.rng
    theta = state.gen.params
    # always draw both tasks so every variant consumes the same random stream
    mtr = msplit.meta_train[int(rng.integers(len(msplit.meta_train)))]
    mte = msplit.meta_test[int(rng.integers(len(msplit.meta_test)))]
    obj_tr = GeneratorObjective(state.gen, state.pool.surrogate(mtr), budget)
    obj_te = GeneratorObjective(state.gen, state.pool.surrogate(mte), budget)

    loss_tr, g_tr, desc = meta_train_step(theta, obj_tr, batch, cfg.alpha)

    def test_branch():
        if not cfg.meta_test:
            return None, None
        return meta_test_feedback(theta, desc, g_tr, obj_tr, obj_te, batch, cfg.alpha,
                                  cfg.fd_step, second_order=cfg.second_order, return_loss=True)

    def flat_branch():
        if not cfg.meta_flat:
            return None, None
        asc = flatness_ascent(theta, g_tr, cfg.eta)
        return flatness_gap(theta, asc, obj_tr, batch, base=(loss_tr, g_tr),
                            mode=cfg.gap_mode, eta=cfg.eta, fd_step=cfg.fd_step)

    if pool_exec is not None:
        f_test = pool_exec.submit(test_branch)
        f_flat = pool_exec.submit(flat_branch)
        loss_te, g_mt = f_test.result()
        loss_gap, gap = f_flat.result()
    else:
        loss_te, g_mt = test_branch()
        loss_gap, gap = flat_branch()

    g_mf = None
    if cfg.meta_flat:
        rest = None
        if cfg.history and cfg.history_mode == "naive":
            rest = naive_rest_sum(state, theta, batch, budget, mtr, cfg.eta, state.cache.active())
        g_mf = flatness_feedback(gap, state.cache, mtr, cfg.lam, use_history=cfg.history,
                                 rest_override=rest)

    new_theta = actual_update(theta, g_tr, g_mt, g_mf, cfg.beta)
    pieces = dict(mtr=mtr, mte=mte, loss_tr=loss_tr, loss_te=loss_te, loss_gap=loss_gap,
                  g_tr=g_tr, g_mt=g_mt, gap=gap, g_mf=g_mf)
    return new_theta, pieces


TraceSink = Callable[[StepTrace], None]
Observer = Callable[[IterationInfo], None]


def train(
    cfg: RunConfig,
    split: DatasetSplit | None = None,
    state: TrainState | None = None,
    trace: TraceSink | None = None,
    observer: Observer | None = None,
    stop_after_cycle: int | None = None,
    on_cycle_end: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Alternate generator epochs (meta scheme) and surrogate epochs.

    Resumable at cycle boundaries: pass a restored ``state`` and training picks
    up at ``state.cycle``. ``stop_after_cycle`` ends early (for interruption
    tests) after that many completed cycles.
    """
    cfg.validate()
    split = build_suite(cfg) if split is None else split
    if len(split.seen) < 2:
        raise BadConfig("need at least 2 seen tasks")
    state = init_state(cfg, split) if state is None else state
    budget = NoiseBudget(cfg.epsilon)
    seen_ids = [t.task_id for t in split.seen]
    executor = ThreadPoolExecutor(max_workers=2) if cfg.parallel_branches else None
    try:
        if not state.warmed_up:
            for _ in range(cfg.surr_warmup_epochs):
                state.pool = surrogate_update_epoch(state.pool, state.gen, split.train, cfg.surr_lr,
                                                    state.rng, budget, cfg.batch_size)
            state.warmed_up = True
        while state.cycle < cfg.cycles:
            if stop_after_cycle is not None and state.cycle >= stop_after_cycle:
                break
            fresh = True
            for epoch in range(cfg.gen_epochs_per_cycle):
                msplit = split_tasks(seen_ids, state.rng)
                for batch in iter_epoch(split.train, cfg.batch_size, state.rng, seen_ids):
                    before = state.gen.params
                    phase = state.cache.phase
                    new_theta, p = generator_iteration(cfg, state, batch, msplit, budget, executor)
                    state.gen = state.gen.with_params(new_theta)
                    rec = StepTrace(
                        iteration=state.iteration,
                        cycle=state.cycle,
                        epoch=epoch,
                        mtr_task=p["mtr"],
                        mte_task=p["mte"],
                        meta_train=msplit.meta_train,
                        meta_test=msplit.meta_test,
                        loss_mtr=p["loss_tr"],
                        loss_mte=p["loss_te"],
                        loss_gap=p["loss_gap"],
                        grad_norm_mtr=p["g_tr"].norm(),
                        grad_norm_meta_test=None if p["g_mt"] is None else p["g_mt"].norm(),
                        grad_norm_meta_flat=None if p["g_mf"] is None else p["g_mf"].norm(),
                        cache_phase=phase,
                    )
                    state.iteration += 1
                    if trace is not None:
                        trace(rec)
                    if observer is not None:
                        observer(IterationInfo(rec, before, new_theta, batch, p["g_tr"], p["g_mt"],
                                               p["gap"], p["g_mf"], state.cache, fresh, state))
                    fresh = False
            for _ in range(cfg.surr_epochs_per_cycle):
                state.pool = surrogate_update_epoch(state.pool, state.gen, split.train, cfg.surr_lr,
                                                    state.rng, budget, cfg.batch_size)
            # surrogates changed, so past gap signals describe a stale landscape
            state.cache.reset()
            state.cycle += 1
            if on_cycle_end is not None:
                on_cycle_end(state)
    finally:
        if executor is not None:
            executor.shutdown()
    return state


class TraceWriter:
    """Appends one JSON record per iteration to a line-delimited file."""

    def __init__(self, path, append: bool = True):
        self.path = path
        self._fh = open(path, "a" if append else "w")

    def __call__(self, rec: StepTrace) -> None:
        self._fh.write(rec.to_json() + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def timed_train(cfg: RunConfig, split: DatasetSplit | None = None, **kw) -> tuple[TrainState, float]:
    t0 = time.perf_counter()
    state = train(cfg, split, **kw)
    return state, time.perf_counter() - t0
