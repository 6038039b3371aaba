"""Command-line entry point: ``python -m mctueg <command> ...``."""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ABLATION_METHODS, ParseError, RunConfig, ValidationError, load_config

OUTPUT_ROOT_ENV = "MCTUEG_OUTPUT_ROOT"


class CommandError(RuntimeError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg


def _out_dir(args, cfg: RunConfig, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{command}-{cfg.digest()[:10]}"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, write_manifest
    from .metascheme import TraceWriter, build_suite, train

    cfg = _config(args)
    out = _out_dir(args, cfg, "train")
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.bin"
    split = build_suite(cfg)
    state = None
    if args.resume:
        if not ckpt_path.is_file():
            raise CommandError(f"nothing to resume: {ckpt_path} does not exist")
        ck = load_checkpoint(ckpt_path)
        if ck.config().digest() != cfg.digest():
            raise CommandError("checkpoint was written with a different config")
        state = ck.to_state(split, cfg)
        _log(f"resuming at cycle {state.cycle}, iteration {state.iteration}")
    write_manifest(out, cfg, command="train")

    def checkpoint(st):
        save_checkpoint(Checkpoint.from_state(st, cfg), ckpt_path)
        _log(f"cycle {st.cycle}/{cfg.cycles} done, iteration {st.iteration}")

    t0 = time.perf_counter()
    with TraceWriter(out / "trace.jsonl", append=args.resume) as tw:
        state = train(cfg, split, state=state, trace=tw, on_cycle_end=checkpoint,
                      stop_after_cycle=args.stop_after)
    save_checkpoint(Checkpoint.from_state(state, cfg), ckpt_path)
    print(f"{ckpt_path}\t{state.iteration} iterations\t{time.perf_counter() - t0:.1f}s")
    return 0


def _generator_from(path):
    from .checkpoint import load_checkpoint
    from .metascheme import build_suite, init_state

    ck = load_checkpoint(path)
    cfg = ck.config()
    split = build_suite(cfg)
    state = ck.to_state(split, cfg)
    return cfg, split, state


def cmd_generate(args) -> int:
    from .evalharness import transform_dataset
    from .models import NoiseBudget
    from .tasksuite import export_split

    cfg, split, state = _generator_from(args.checkpoint)
    protected = transform_dataset(state.gen, split, NoiseBudget(cfg.epsilon))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_split(protected.train, protected.tasks, protected.dims, out)
    if args.test_out:
        export_split(protected.test, protected.tasks, protected.dims, args.test_out)
    dev = np.abs(protected.train.images - split.train.images).max()
    print(f"{out}\t{len(protected.train)} images\tmax deviation {dev:.6f}")
    return 0


def _protocol(args, cfg: RunConfig, command: str) -> int:
    from .checkpoint import write_manifest
    from .evalharness import run_protocol

    out = _out_dir(args, cfg, command)
    write_manifest(out, cfg, command=command)
    generators = None
    if getattr(args, "checkpoint", None):
        _, _, state = _generator_from(args.checkpoint)
        generators = lambda method, seed: state.gen  # noqa: E731
    report = run_protocol(cfg, generators=generators, progress=_log if args.verbose else None)
    paths = report.write(out)
    sys.stdout.write(report.to_tsv())
    _log(f"report written to {paths[0]}")
    return 0


def _override(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if args.methods:
        changes["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    if args.seeds is not None:
        if args.seeds < 1:
            raise ValidationError("--seeds must be at least 1")
        changes["eval_seeds"] = tuple(range(args.seeds))
    if args.tasks:
        changes["eval_tasks"] = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
    return cfg.replace(**changes) if changes else cfg


def cmd_evaluate(args) -> int:
    cfg = _override(_config(args), args)
    return _protocol(args, cfg, "evaluate")


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if not args.methods:
        cfg = cfg.replace(methods=ABLATION_METHODS)
    cfg = _override(cfg, args)
    return _protocol(args, cfg, "ablate")


def cmd_spectra(args) -> int:
    from .evalharness import generator_flatness, probe_models
    from .flatness import left_mass

    cfg, split, state = _generator_from(args.checkpoint)
    out = Path(args.out) if args.out else _out_dir(args, cfg, "spectra")
    out.mkdir(parents=True, exist_ok=True)
    models = {t: state.pool.surrogate(t) for t in state.pool.task_ids}
    models.update(probe_models(split, split.unseen, cfg, args.seed))
    probes = generator_flatness(state.gen, models, split, cfg, args.seed)
    lines = ["task\tseen\ttop_eigenvalue\tleft_mass"]
    for p in probes:
        p.spectrum.save(out / f"spectrum_{p.task}.tsv")
        lines.append(f"{p.task}\t{'seen' if p.seen else 'unseen'}\t{p.top_eigenvalue:.6g}\t"
                     f"{left_mass(p.spectrum, args.tau):.6g}")
    text = "\n".join(lines) + "\n"
    (out / "summary.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(print)
    return 1 if failures else 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mctueg", description="Unexploitable-example generator toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a generator")
    t.add_argument("--config", help="config file (key = value lines)")
    t.add_argument("--out", help="run directory")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    t.add_argument("--stop-after", type=int, default=None, metavar="CYCLES",
                   help="stop once this many cycles are complete")
    t.set_defaults(fn=cmd_train)

    g = sub.add_parser("generate", help="write the protected training split")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--out", required=True, help="output dataset file")
    g.add_argument("--test-out", help="also export the (clean) test split here")
    g.set_defaults(fn=cmd_generate)

    for name, fn, help_ in (("evaluate", cmd_evaluate, "run the evaluation protocol"),
                            ("ablate", cmd_ablate, "evaluate every method variant")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--config")
        e.add_argument("--out")
        e.add_argument("--methods", help="comma-separated method list")
        e.add_argument("--seeds", type=int, help="use seeds 0..N-1")
        e.add_argument("--tasks", help="comma-separated task ids (default: all)")
        e.add_argument("--verbose", action="store_true")
        if name == "evaluate":
            e.add_argument("--checkpoint", help="evaluate this generator instead of training one per seed")
        e.set_defaults(fn=fn)

    s = sub.add_parser("spectra", help="Hessian spectra of a trained generator")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out")
    s.add_argument("--tau", type=float, default=0.0, help="left-mass threshold")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_spectra)

    st = sub.add_parser("selftest", help="gradient, HVP and closed-form checks")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (FileNotFoundError, ParseError, ValidationError, CommandError) as exc:
        print(f"mctueg {args.command}: {exc}", file=sys.stderr)
        return 1
