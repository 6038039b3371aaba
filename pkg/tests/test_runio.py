"""Config parsing, checkpoints and the command line."""
import json
import struct

import numpy as np
import pytest

from mctueg.checkpoint import (
    Checkpoint,
    CorruptFile,
    VersionMismatch,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from mctueg.cli import main
from mctueg.config import ParseError, RunConfig, ValidationError, load_config, parse_config, save_config
from mctueg.metascheme import TraceWriter, build_suite, read_trace, train

CONFIGS = __import__("pathlib").Path(__file__).resolve().parents[1] / "configs"


def test_default_file_has_reference_hyperparams():
    cfg = load_config(CONFIGS / "default.cfg")
    assert (cfg.alpha, cfg.beta, cfg.eta, cfg.lam) == (1e-4, 2e-5, 5e-4, 0.2)
    assert cfg.epsilon == 8 / 255


def test_negative_alpha_rejected():
    with pytest.raises(ValidationError, match="alpha must be positive"):
        parse_config("alpha = -1")


def test_duplicate_key():
    with pytest.raises(ParseError) as exc:
        parse_config("alpha = 1\nbeta = 2\nalpha = 3\n")
    assert exc.value.line == 3 and exc.value.key == "alpha"


def test_unknown_key():
    with pytest.raises(ParseError, match="unknown key"):
        parse_config("# comment\ngamma = 1\n")


def test_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.cfg"):
        load_config(tmp_path / "nope.cfg")


def test_config_text_round_trip(tmp_path):
    cfg = RunConfig(alpha=0.5, eval_seeds=(3, 4), methods=("raw",), history_mode="naive")
    save_config(cfg, tmp_path / "c.cfg")
    back = load_config(tmp_path / "c.cfg")
    assert back == cfg and back.digest() == cfg.digest()


def _state(cfg, cycles=None):
    split = build_suite(cfg)
    return split, train(cfg, split, stop_after_cycle=cycles)


def test_checkpoint_bytes_round_trip(tiny_config, tmp_path):
    _, st = _state(tiny_config)
    path = tmp_path / "c.bin"
    save_checkpoint(Checkpoint.from_state(st, tiny_config), path)
    again = encode_checkpoint(load_checkpoint(path))
    assert again == path.read_bytes()


def test_resume_matches_uninterrupted(tiny_config, tmp_path):
    cfg = tiny_config.replace(cycles=3)
    split, full = _state(cfg)
    _, half = _state(cfg, cycles=1)
    path = tmp_path / "c.bin"
    save_checkpoint(Checkpoint.from_state(half, cfg), path)
    resumed = train(cfg, split, state=load_checkpoint(path).to_state(split))
    assert encode_checkpoint(Checkpoint.from_state(resumed, cfg)) == \
        encode_checkpoint(Checkpoint.from_state(full, cfg))


def test_resumed_trace_has_no_gaps(tiny_config, tmp_path):
    cfg = tiny_config.replace(cycles=3)
    split = build_suite(cfg)
    trace = tmp_path / "trace.jsonl"
    with TraceWriter(trace, append=False) as tw:
        half = train(cfg, split, trace=tw, stop_after_cycle=1)
    state = Checkpoint.from_state(half, cfg)
    with TraceWriter(trace) as tw:
        train(cfg, split, state=state.to_state(split), trace=tw)
    its = [r["iteration"] for r in read_trace(trace)]
    assert its == list(range(len(its)))


def test_truncated_checkpoint(tiny_config, tmp_path):
    _, st = _state(tiny_config)
    raw = encode_checkpoint(Checkpoint.from_state(st, tiny_config))
    path = tmp_path / "c.bin"
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptFile):
        load_checkpoint(path)


def test_flipped_byte_detected(tiny_config, tmp_path):
    _, st = _state(tiny_config)
    raw = bytearray(encode_checkpoint(Checkpoint.from_state(st, tiny_config)))
    raw[len(raw) // 2] ^= 0x01
    path = tmp_path / "c.bin"
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptFile):
        load_checkpoint(path)


def test_version_mismatch(tiny_config, tmp_path):
    _, st = _state(tiny_config)
    raw = bytearray(encode_checkpoint(Checkpoint.from_state(st, tiny_config)))
    raw[8:12] = struct.pack("<I", 99)
    path = tmp_path / "c.bin"
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)


# ---------------------------------------------------------------- CLI

def test_cli_selftest(capsys):
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_cli_missing_config(capsys):
    assert main(["train", "--config", "missing.cfg"]) != 0
    assert "missing.cfg" in capsys.readouterr().err


def test_cli_bad_flag():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 2


def test_cli_train_generate_spectra(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MCTUEG_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = CONFIGS / "tiny.cfg"
    assert main(["train", "--config", str(cfg)]) == 0
    runs = list((tmp_path / "root").iterdir())
    assert len(runs) == 1
    run = runs[0]
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config_sha256"] == load_config(cfg).digest()
    ckpt = run / "checkpoint.bin"
    assert main(["generate", "--checkpoint", str(ckpt), "--out", str(tmp_path / "train.bin")]) == 0
    assert (tmp_path / "train.bin").stat().st_size > 0
    assert main(["spectra", "--checkpoint", str(ckpt), "--out", str(tmp_path / "spec")]) == 0
    assert (tmp_path / "spec" / "summary.tsv").exists()


def test_cli_train_resume(tmp_path):
    cfg_path = tmp_path / "c.cfg"
    cfg = load_config(CONFIGS / "tiny.cfg").replace(cycles=2)
    save_config(cfg, cfg_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out), "--stop-after", "1"]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(out), "--resume"]) == 0
    its = [r["iteration"] for r in read_trace(out / "trace.jsonl")]
    assert its == list(range(len(its)))
    ref = tmp_path / "ref"
    assert main(["train", "--config", str(cfg_path), "--out", str(ref)]) == 0
    assert (ref / "checkpoint.bin").read_bytes() == (out / "checkpoint.bin").read_bytes()


def test_cli_ablate_row_count(tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--config", str(CONFIGS / "tiny.cfg"), "--methods", "raw,random_noise",
                 "--seeds", "1", "--out", str(out)]) == 0
    rows = (out / "report.tsv").read_text().strip().splitlines()[1:]
    n_tasks = len(build_suite(load_config(CONFIGS / "tiny.cfg")).tasks)
    assert len(rows) == 2 * n_tasks
