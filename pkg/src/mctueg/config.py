"""Run configuration: a flat ``key = value`` text format with typed validation."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if key is not None:
            loc.append(f"key {key!r}")
        super().__init__(f"{', '.join(loc)}: {message}" if loc else message)
        self.line = line
        self.key = key


class ValidationError(ValueError):
    pass


ABLATION_METHODS = (
    "raw",
    "random_noise",
    "mctueg",
    "mctueg_wo_meta_test",
    "mctueg_wo_meta_flat",
    "mctueg_wo_history",
    "mctueg_wo_second_order",
)


@dataclass
class RunConfig:
    # synthetic suite
    data_seed: int = 0
    num_seen: int = 6
    num_unseen: int = 2
    channels: int = 1
    height: int = 16
    width: int = 16
    n_train: int = 1024
    n_test: int = 512

    # scheme step sizes and weights
    alpha: float = 1e-4
    beta: float = 2e-5
    eta: float = 5e-4
    lam: float = 0.2
    epsilon: float = 8 / 255

    # alternating schedule
    cycles: int = 10
    gen_epochs_per_cycle: int = 3
    surr_epochs_per_cycle: int = 1
    surr_warmup_epochs: int = 0
    surr_lr: float = 1e-3
    batch_size: int = 32
    train_seed: int = 0

    # architectures
    gen_hidden: int = 32
    gen_init_scale: float = 1.0
    gen_out_scale: float = 1.0
    surr_hidden: int = 32
    surr_channels: int = 8
    shared_trunk: bool = True

    # scheme switches
    meta_test: bool = True
    meta_flat: bool = True
    history: bool = True
    second_order: bool = True
    history_mode: str = "cached"  # cached | naive
    gap_mode: str = "first_order"  # first_order | exact
    parallel_branches: bool = False
    fd_step: float = 1e-4

    # evaluation
    target_hidden: int = 64
    target_channels: int = 12
    target_epochs: int = 30
    target_lr: float = 0.3
    eval_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    methods: tuple[str, ...] = ("raw", "random_noise", "mctueg")
    eval_tasks: tuple[str, ...] = ()  # empty means every task in the suite

    # spectra
    lanczos_steps: int = 32
    lanczos_probes: int = 8
    power_iters: int = 50
    spectrum_batch: int = 128

    output_dir: str = ""

    def validate(self) -> "RunConfig":
        def positive(*names):
            for n in names:
                if not getattr(self, n) > 0:
                    raise ValidationError(f"{n} must be positive")

        def nonneg(*names):
            for n in names:
                if getattr(self, n) < 0:
                    raise ValidationError(f"{n} must be non-negative")

        positive("alpha", "beta", "eta", "epsilon", "surr_lr", "fd_step", "target_lr",
                 "batch_size", "n_train", "n_test", "gen_hidden", "surr_hidden", "surr_channels",
                 "target_hidden", "target_channels", "gen_epochs_per_cycle", "spectrum_batch",
                 "lanczos_probes", "power_iters", "channels")
        nonneg("lam", "cycles", "surr_epochs_per_cycle", "surr_warmup_epochs", "target_epochs",
               "gen_init_scale", "gen_out_scale")
        if self.epsilon > 1:
            raise ValidationError("epsilon must be at most 1")
        if self.num_seen < 2:
            raise ValidationError("num_seen must be at least 2")
        if self.num_seen > 6:
            raise ValidationError("num_seen must be at most 6")
        if not 1 <= self.num_unseen <= 4:
            raise ValidationError("num_unseen must be in 1..4")
        if self.height < 8 or self.width < 8:
            raise ValidationError("height and width must be at least 8")
        if self.lanczos_steps < 2:
            raise ValidationError("lanczos_steps must be at least 2")
        if self.history_mode not in ("cached", "naive"):
            raise ValidationError("history_mode must be 'cached' or 'naive'")
        if self.gap_mode not in ("first_order", "exact"):
            raise ValidationError("gap_mode must be 'first_order' or 'exact'")
        if not self.eval_seeds:
            raise ValidationError("eval_seeds must not be empty")
        bad = [m for m in self.methods if m not in ABLATION_METHODS]
        if bad:
            raise ValidationError(f"unknown method(s): {', '.join(bad)}")
        if not self.methods:
            raise ValidationError("methods must not be empty")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_float(raw: str) -> float:
    if "/" in raw:
        num, den = raw.split("/", 1)
        return float(num) / float(den)
    return float(raw)


def _parse_value(tp, raw: str):
    if tp is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return _parse_float(raw)
    if tp is str:
        return raw
    if tp == tuple[int, ...]:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if tp == tuple[str, ...]:
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    raise TypeError(f"unsupported field type {tp}")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    hints = get_type_hints(RunConfig)
    values = {}
    lines_of = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ParseError("expected 'key = value'", lineno)
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in hints:
            raise ParseError("unknown key", lineno, key)
        if key in values:
            raise ParseError(f"duplicate key (first set on line {lines_of[key]})", lineno, key)
        try:
            values[key] = _parse_value(hints[key], raw)
        except (ValueError, TypeError) as exc:
            raise ParseError(str(exc), lineno, key) from None
        lines_of[key] = lineno
    cfg = dataclasses.replace(base or RunConfig(), **values)
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_text())


METHOD_SWITCHES = {
    "mctueg": {},
    "mctueg_wo_meta_test": {"meta_test": False},
    "mctueg_wo_meta_flat": {"meta_flat": False},
    "mctueg_wo_history": {"history": False},
    "mctueg_wo_second_order": {"second_order": False},
}


def config_for_method(cfg: RunConfig, method: str) -> RunConfig:
    """Switch settings for a scheme variant; every variant flips exactly one switch."""
    if method not in METHOD_SWITCHES:
        raise ValidationError(f"{method!r} is not a generator-training method")
    base = dict(meta_test=True, meta_flat=True, history=True, second_order=True)
    base.update(METHOD_SWITCHES[method])
    return cfg.replace(**base)
