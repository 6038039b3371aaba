"""Three-step evaluation: protect the training set, train a fresh target per
task on it, score the target on the clean test set.

Efficacy is read in the defender's direction: lower accuracy / mIoU or higher
MAE / MSE than a target trained on raw data means the protection worked.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import ABLATION_METHODS, METHOD_SWITCHES, RunConfig, config_for_method
from .diffcore import gradient
from .flatness import SpectrumEstimate, hessian_spectrum, top_eigenvalue
from .models import (
    GeneratorModel,
    GeneratorObjective,
    NoiseBudget,
    TaskModel,
    TaskObjective,
    build_target,
    protect,
)
from .tasksuite import (
    IMAGE_CLASS,
    METRIC_DROPS_WHEN_PROTECTED,
    PIXEL_CLASS,
    DatasetSplit,
    TaskSpec,
    iter_epoch,
)


class EmptyTestSet(ValueError):
    pass


def transform_dataset(gen: GeneratorModel, split: DatasetSplit, budget: NoiseBudget,
                      chunk: int = 256) -> DatasetSplit:
    """Replace every training image by its protected version. Test data and
    labels are shared with the input split, untouched."""
    x = split.train.images
    out = np.empty_like(x)
    for s in range(0, x.shape[0], chunk):
        out[s:s + chunk] = protect(gen, x[s:s + chunk], budget)
    return split.with_train_images(out)


def baseline_random_noise(split: DatasetSplit, budget: NoiseBudget, rng: np.random.Generator) -> DatasetSplit:
    x = split.train.images
    noise = rng.uniform(-budget.epsilon, budget.epsilon, size=x.shape)
    return split.with_train_images(np.clip(x + noise, 0.0, 1.0))


def train_target(
    task: TaskSpec,
    split: DatasetSplit,
    epochs: int = 30,
    lr: float = 0.3,
    rng: np.random.Generator | None = None,
    hidden: int = 64,
    channels: int = 12,
    batch_size: int = 32,
) -> TaskModel:
    """Fresh target trained by minibatch gradient descent on ``split.train``."""
    rng = np.random.default_rng(0) if rng is None else rng
    model = build_target(task, split.dims, hidden, rng, channels)
    obj = TaskObjective(model)
    params = model.params
    for _ in range(epochs):
        for batch in iter_epoch(split.train, batch_size, rng, [task.task_id]):
            _, g = gradient(obj, params, batch)
            params = params.axpy(-lr, g)
    return model.with_params(params)


def mean_iou(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Mean over classes of intersection / union, pooled over all pixels.
    Classes absent from both prediction and labels are skipped."""
    ious = []
    for k in range(num_classes):
        p, y = pred == k, labels == k
        union = np.logical_or(p, y).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, y).sum() / union)
    return float(np.mean(ious)) if ious else 1.0


def score(metric: str, pred: np.ndarray, labels: np.ndarray, num_classes: int = 0) -> float:
    if labels.shape[0] == 0:
        raise EmptyTestSet("no test samples")
    if metric == "accuracy":
        return float(np.mean(pred == labels))
    if metric == "miou":
        return mean_iou(pred, labels, num_classes)
    diff = pred.reshape(labels.shape) - labels
    if metric == "mae":
        return float(np.mean(np.abs(diff)))
    if metric == "mse":
        return float(np.mean(diff * diff))
    raise ValueError(f"unknown metric {metric!r}")


def evaluate_target(target: TaskModel, split: DatasetSplit, metric: str | None = None) -> float:
    test = split.test
    if len(test) == 0:
        raise EmptyTestSet("no test samples")
    task = target.task
    metric = task.metric_kind if metric is None else metric
    pred = target.predict(test.images)
    k = task.out_dim if task.label_kind in (IMAGE_CLASS, PIXEL_CLASS) else 0
    return score(metric, pred, test.labels[task.task_id], k)


def efficacy(task: TaskSpec, value: float, raw_value: float) -> float:
    """Relative change versus the raw-data target, signed so that positive
    means worse for the attacker."""
    denom = max(abs(raw_value), 1e-12)
    if METRIC_DROPS_WHEN_PROTECTED[task.metric_kind]:
        return (raw_value - value) / denom
    return (value - raw_value) / denom


# ---------------------------------------------------------------- protocol

@dataclass
class ReportRow:
    task: str
    method: str
    metric: str
    direction: str
    seen: bool
    seeds: tuple[int, ...]
    values: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def median(self) -> float:
        return float(np.median(self.values))

    @property
    def std(self) -> float | None:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else None

    def record(self) -> dict:
        return {
            "task": self.task, "method": self.method, "metric": self.metric,
            "direction": self.direction, "seen": self.seen, "seeds": list(self.seeds),
            "values": list(self.values), "mean": self.mean, "median": self.median, "std": self.std,
        }


@dataclass
class ProtocolReport:
    rows: list[ReportRow] = field(default_factory=list)

    def row(self, task: str, method: str) -> ReportRow:
        for r in self.rows:
            if r.task == task and r.method == method:
                return r
        raise KeyError((task, method))

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    @property
    def tasks(self) -> list[str]:
        return list(dict.fromkeys(r.task for r in self.rows))

    def efficacy_by_seed(self, method: str, tasks: Sequence[str], specs: Mapping[str, TaskSpec]) -> np.ndarray:
        """Per-seed efficacy of ``method`` versus raw, averaged over ``tasks``."""
        per_task = []
        for t in tasks:
            raw = self.row(t, "raw")
            r = self.row(t, method)
            per_task.append([efficacy(specs[t], v, rv) for v, rv in zip(r.values, raw.values)])
        return np.mean(np.array(per_task), axis=0)

    def to_tsv(self) -> str:
        head = "task\tmethod\tmetric\tdirection\tseen\tn_seeds\tmean\tstd\tmedian"
        lines = [head]
        for r in self.rows:
            std = "" if r.std is None else f"{r.std:.6g}"
            lines.append(
                f"{r.task}\t{r.method}\t{r.metric}\t{r.direction}\t{'seen' if r.seen else 'unseen'}\t"
                f"{len(r.seeds)}\t{r.mean:.6g}\t{std}\t{r.median:.6g}"
            )
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.tsv", out / "report.jsonl"]
        paths[0].write_text(self.to_tsv())
        paths[1].write_text("".join(json.dumps(r.record(), sort_keys=True) + "\n" for r in self.rows))
        for m in self.methods:
            p = out / f"metric_{m}.tsv"
            p.write_text("".join(f"{r.task}\t{r.median!r}\n" for r in self.rows if r.method == m))
            paths.append(p)
        return paths

    @classmethod
    def read_jsonl(cls, path) -> "ProtocolReport":
        rows = []
        for line in Path(path).read_text().splitlines():
            d = json.loads(line)
            rows.append(ReportRow(d["task"], d["method"], d["metric"], d["direction"], d["seen"],
                                  tuple(d["seeds"]), tuple(d["values"])))
        return cls(rows)


GeneratorSource = Callable[[str, int], GeneratorModel]


def default_generator_source(cfg: RunConfig, split: DatasetSplit) -> GeneratorSource:
    """Trains one generator per (method, seed) with ``train_seed = seed``."""
    from .metascheme import train

    def source(method: str, seed: int) -> GeneratorModel:
        run_cfg = config_for_method(cfg, method).replace(train_seed=seed)
        return train(run_cfg, split).gen

    return source


def run_protocol(
    cfg: RunConfig,
    split: DatasetSplit | None = None,
    generators: GeneratorSource | None = None,
    progress: Callable[[str], None] | None = None,
) -> ProtocolReport:
    """Every (task, method, seed) cell; rows are ordered task-major then by
    the configured method order.

    A seed fixes the generator's training stream, the random-noise draw and
    the target's init and batch order, so methods are compared on common
    randomness.
    """
    cfg.validate()
    if split is None:
        from .metascheme import build_suite
        split = build_suite(cfg)
    tasks = [split.task(t) for t in cfg.eval_tasks] if cfg.eval_tasks else list(split.tasks)
    budget = NoiseBudget(cfg.epsilon)
    generators = default_generator_source(cfg, split) if generators is None else generators
    say = progress or (lambda _msg: None)

    values: dict[tuple[str, str], list[float]] = {}
    for method in cfg.methods:
        for seed in cfg.eval_seeds:
            if method == "raw":
                data = split
            elif method == "random_noise":
                data = baseline_random_noise(split, budget, np.random.default_rng([seed, 11]))
            elif method in METHOD_SWITCHES:
                data = transform_dataset(generators(method, seed), split, budget)
            else:
                raise ValueError(f"unknown method {method!r}")
            for task in tasks:
                target = train_target(task, data, cfg.target_epochs, cfg.target_lr,
                                      np.random.default_rng([seed, 12]), cfg.target_hidden,
                                      cfg.target_channels, cfg.batch_size)
                v = evaluate_target(target, data)
                values.setdefault((task.task_id, method), []).append(v)
                say(f"{method}\tseed={seed}\t{task.task_id}\t{task.metric_kind}={v:.4f}")

    rows = []
    for task in tasks:
        for method in cfg.methods:
            rows.append(ReportRow(task.task_id, method, task.metric_kind, task.direction, task.seen,
                                  tuple(cfg.eval_seeds), tuple(values[(task.task_id, method)])))
    return ProtocolReport(rows)


# ---------------------------------------------------------------- flatness probes

@dataclass
class FlatnessProbe:
    task: str
    seen: bool
    top_eigenvalue: float
    spectrum: SpectrumEstimate


def probe_models(split: DatasetSplit, tasks: Sequence[TaskSpec], cfg: RunConfig, seed: int) -> dict[str, TaskModel]:
    """Clean-data targets used to probe generator flatness on tasks the
    generator never trained against."""
    return {
        t.task_id: train_target(t, split, cfg.target_epochs, cfg.target_lr, np.random.default_rng([seed, 13]),
                                cfg.target_hidden, cfg.target_channels, cfg.batch_size)
        for t in tasks
    }


def generator_flatness(
    gen: GeneratorModel,
    models: Mapping[str, TaskModel],
    split: DatasetSplit,
    cfg: RunConfig,
    seed: int = 0,
) -> list[FlatnessProbe]:
    """Top eigenvalue and spectral density of each task loss w.r.t. the
    generator parameters at ``gen``. Read-only: the generator is not updated."""
    budget = NoiseBudget(cfg.epsilon)
    ids = list(models)
    batch = next(iter_epoch(split.train, cfg.spectrum_batch, np.random.default_rng([seed, 14]), ids))
    out = []
    for t in ids:
        obj = GeneratorObjective(gen, models[t], budget)
        lam = top_eigenvalue(obj, gen.params, batch, cfg.power_iters, np.random.default_rng([seed, 15]), cfg.fd_step)
        spec = hessian_spectrum(obj, gen.params, batch, cfg.lanczos_steps, cfg.lanczos_probes,
                                np.random.default_rng([seed, 16]), cfg.fd_step)
        out.append(FlatnessProbe(t, split.task(t).seen, lam, spec))
    return out
