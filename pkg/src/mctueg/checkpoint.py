"""Versioned binary checkpoints and run manifests.

Container layout (all integers little-endian)::

    magic   8 bytes  b"UEGCKPT\\x00"
    version u32
    sections, each:
        name_len u16, name utf-8
        payload_len u64, payload
        crc32 u32 over name + payload
    a final section named "end" with an empty payload

See docs/formats.md for the payload encodings.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, parse_config
from .diffcore import ParamVector, make_layout
from .metascheme import FlatnessCache, TrainState, init_state
from .tasksuite import DatasetSplit

MAGIC = b"UEGCKPT\x00"
FORMAT_VERSION = 1


class CorruptFile(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    gen: ParamVector
    pool: ParamVector
    cache_phase: int
    cache: dict[str, tuple[int, np.ndarray]]
    rng_state: dict
    cycle: int
    iteration: int
    warmed_up: bool
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_state(cls, state: TrainState, cfg: RunConfig) -> "Checkpoint":
        snap = state.cache.snapshot()
        return cls(cfg.to_text(), state.gen.params, state.pool.params, snap["phase"], snap["tasks"],
                   state.rng.bit_generator.state, state.cycle, state.iteration, state.warmed_up)

    def config(self) -> RunConfig:
        return parse_config(self.config_text)

    def to_state(self, split: DatasetSplit, cfg: RunConfig | None = None) -> TrainState:
        cfg = self.config() if cfg is None else cfg
        fresh = init_state(cfg, split)
        if fresh.gen.params.layout != self.gen.layout or fresh.pool.params.layout != self.pool.layout:
            raise CorruptFile("checkpoint layout does not match the configured architecture")
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        cache = FlatnessCache.restore(len(self.gen), {"phase": self.cache_phase, "tasks": self.cache})
        return TrainState(fresh.gen.with_params(self.gen), fresh.pool.with_params(self.pool), cache, rng,
                          self.cycle, self.iteration, self.warmed_up)


# ---------------------------------------------------------------- encoding

def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptFile("unexpected end of data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def encode_params(p: ParamVector) -> bytes:
    out = [struct.pack("<I", len(p.layout))]
    for seg in p.layout:
        out.append(_str(seg.name))
        out.append(struct.pack("<I", len(seg.shape)))
        out.append(struct.pack(f"<{len(seg.shape)}Q", *seg.shape))
    out.append(p.values.astype("<f8").tobytes())
    return b"".join(out)


def decode_params(buf: bytes) -> ParamVector:
    r = _Reader(buf)
    (nseg,) = r.unpack("<I")
    entries = []
    for _ in range(nseg):
        name = r.string()
        (nd,) = r.unpack("<I")
        shape = r.unpack(f"<{nd}Q")
        entries.append((name, tuple(int(s) for s in shape)))
    layout = make_layout(entries)
    n = sum(s.length for s in layout)
    values = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)
    if r.pos != len(buf):
        raise CorruptFile("trailing bytes in parameter section")
    return ParamVector(values, layout)


def _section(name: str, payload: bytes) -> bytes:
    nb = name.encode("utf-8")
    crc = zlib.crc32(nb + payload)
    return struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload + struct.pack("<I", crc)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    meta = {
        "cycle": ck.cycle,
        "iteration": ck.iteration,
        "warmed_up": ck.warmed_up,
        "cache_phase": ck.cache_phase,
        "rng_state": ck.rng_state,
        "extra": ck.extra,
    }
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(_section("config", ck.config_text.encode("utf-8")))
    parts.append(_section("meta", json.dumps(meta, sort_keys=True).encode("utf-8")))
    parts.append(_section("params/gen", encode_params(ck.gen)))
    parts.append(_section("params/pool", encode_params(ck.pool)))
    for task in sorted(ck.cache):
        count, mean = ck.cache[task]
        payload = struct.pack("<Q", count) + np.asarray(mean, dtype="<f8").tobytes()
        parts.append(_section(f"cache/{task}", payload))
    parts.append(_section("end", b""))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:8] != MAGIC:
        raise CorruptFile("not a checkpoint file")
    (version,) = struct.unpack("<I", buf[8:12])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    r = _Reader(buf)
    r.pos = 12
    sections = {}
    while True:
        name = r.string()
        (n,) = r.unpack("<Q")
        payload = r.take(n)
        (crc,) = r.unpack("<I")
        if zlib.crc32(name.encode("utf-8") + payload) != crc:
            raise CorruptFile(f"checksum mismatch in section {name!r}")
        if name == "end":
            break
        sections[name] = payload
    if r.pos != len(buf):
        raise CorruptFile("trailing bytes after end section")
    for need in ("config", "meta", "params/gen", "params/pool"):
        if need not in sections:
            raise CorruptFile(f"missing section {need!r}")
    meta = json.loads(sections["meta"])
    gen = decode_params(sections["params/gen"])
    cache = {}
    for name, payload in sections.items():
        if name.startswith("cache/"):
            (count,) = struct.unpack("<Q", payload[:8])
            mean = np.frombuffer(payload[8:], dtype="<f8").astype(np.float64)
            if mean.shape != (len(gen),):
                raise CorruptFile(f"cache section {name!r} has the wrong length")
            cache[name[len("cache/"):]] = (int(count), mean)
    return Checkpoint(
        sections["config"].decode("utf-8"), gen, decode_params(sections["params/pool"]),
        int(meta["cache_phase"]), cache, meta["rng_state"], int(meta["cycle"]),
        int(meta["iteration"]), bool(meta["warmed_up"]), meta.get("extra", {}),
    )


def save_checkpoint(ck: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ck))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def write_manifest(out_dir, cfg: RunConfig, **extra) -> Path:
    """Everything needed to rerun: config digest and text, seeds, code version."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "code_version": __version__,
        "numpy_version": np.__version__,
        "config_sha256": cfg.digest(),
        "config": cfg.to_text(),
        "data_seed": cfg.data_seed,
        "train_seed": cfg.train_seed,
        "eval_seeds": list(cfg.eval_seeds),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
