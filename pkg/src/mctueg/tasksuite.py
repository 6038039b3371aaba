"""Procedural multi-task shape scenes.

Every image is a single geometric shape on a striped, lightly noisy background.
The same image carries labels for all tasks; tasks differ in what they predict
and in the loss used to train them. Rendering is a pure function of
``(seed, index)`` so any sample can be regenerated from its scene parameters.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np


class BadConfig(ValueError):
    pass


class UnknownTask(KeyError):
    pass


IMAGE_CLASS = "image_class"
PIXEL_CLASS = "pixel_class"
IMAGE_REGRESSION = "image_regression"
PIXEL_REGRESSION = "pixel_regression"
LABEL_KINDS = (IMAGE_CLASS, PIXEL_CLASS, IMAGE_REGRESSION, PIXEL_REGRESSION)

# metric -> whether a successful protection pushes it down (worse target model)
METRIC_DROPS_WHEN_PROTECTED = {"accuracy": True, "miou": True, "mae": False, "mse": False}

SHAPES = ("square", "disk", "triangle", "plus")


@dataclass(frozen=True)
class ImageDims:
    channels: int = 1
    height: int = 16
    width: int = 16

    def __post_init__(self):
        if self.channels < 1 or self.height < 8 or self.width < 8:
            raise BadConfig("images need >= 1 channel and at least 8x8 pixels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def size(self) -> int:
        return self.channels * self.height * self.width


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    label_kind: str
    loss_kind: str
    metric_kind: str
    out_dim: int  # classes for class tasks, regression width for image regression
    seen: bool
    # fixed multiplier on the loss so that one step size suits every task
    loss_weight: float = 1.0

    @property
    def lower_is_better_for_defender(self) -> bool:
        return METRIC_DROPS_WHEN_PROTECTED[self.metric_kind]

    @property
    def direction(self) -> str:
        return "down" if self.lower_is_better_for_defender else "up"

    @property
    def is_pixelwise(self) -> bool:
        return self.label_kind in (PIXEL_CLASS, PIXEL_REGRESSION)


# (task_id, label_kind, loss_kind, metric_kind, out_dim, loss_weight)
# Pixel-wise losses are averaged over pixels, so each pixel's head column gets
# a tiny gradient; their weights compensate. Weights were set by a learning-rate
# sweep of clean-data target training at step size 0.3.
SEEN_POOL = (
    ("shape", IMAGE_CLASS, "cross_entropy", "accuracy", 4, 1.0),
    ("mask", PIXEL_CLASS, "pixel_cross_entropy", "miou", 2, 10.0),
    ("quadrant", IMAGE_CLASS, "squared_hinge", "accuracy", 4, 0.1),
    ("region", PIXEL_CLASS, "pixel_squared_error", "miou", 3, 10.0),
    ("brightness", IMAGE_CLASS, "squared_error", "accuracy", 2, 1.0),
    ("halves", PIXEL_CLASS, "pixel_squared_hinge", "miou", 3, 3.0),
)
UNSEEN_POOL = (
    ("centroid", IMAGE_REGRESSION, "squared_error", "mae", 2, 0.3),
    ("density", PIXEL_REGRESSION, "squared_error", "mse", 1, 10.0),
    ("area", IMAGE_REGRESSION, "squared_error", "mae", 1, 0.3),
    ("contrast", IMAGE_REGRESSION, "squared_error", "mae", 1, 0.3),
)


def task_catalog(num_seen: int, num_unseen: int) -> list[TaskSpec]:
    if num_seen < 2:
        raise BadConfig("need at least 2 seen tasks to form a meta split")
    if num_seen > len(SEEN_POOL):
        raise BadConfig(f"at most {len(SEEN_POOL)} seen tasks are available")
    if num_unseen < 1 or num_unseen > len(UNSEEN_POOL):
        raise BadConfig(f"num_unseen must be in 1..{len(UNSEEN_POOL)}")
    specs = [TaskSpec(*row[:5], seen=True, loss_weight=row[5]) for row in SEEN_POOL[:num_seen]]
    specs += [TaskSpec(*row[:5], seen=False, loss_weight=row[5]) for row in UNSEEN_POOL[:num_unseen]]
    return specs


# ---------------------------------------------------------------- rendering

SCENE_FIELDS = ("kind", "cy", "cx", "radius", "level", "contrast", "base",
                "stripe_amp", "stripe_freq", "stripe_angle", "stripe_phase")


def sample_scene(seed: int, index: int, dims: ImageDims) -> dict:
    rng = np.random.default_rng([int(seed), int(index)])
    h, w = dims.height, dims.width
    r = rng.uniform(0.24, 0.32) * min(h, w)
    jy = min(0.5 * (h - 1) - r, 0.15 * h)
    jx = min(0.5 * (w - 1) - r, 0.15 * w)
    level = int(rng.integers(2))
    return {
        "kind": int(rng.integers(4)),
        "cy": float(0.5 * (h - 1) + rng.uniform(-jy, jy)),
        "cx": float(0.5 * (w - 1) + rng.uniform(-jx, jx)),
        "radius": float(r),
        "level": level,
        "contrast": float(rng.uniform(0.22, 0.3) if level else rng.uniform(0.1, 0.16)),
        "base": float(rng.uniform(0.35, 0.65)),
        "stripe_amp": float(rng.uniform(0.02, 0.08)),
        "stripe_freq": float(rng.uniform(0.3, 1.2)),
        "stripe_angle": float(rng.uniform(0, np.pi)),
        "stripe_phase": float(rng.uniform(0, 2 * np.pi)),
        # per-pixel grain and colour tint, drawn last so scene fields stay stable
        "_grain": rng.standard_normal((dims.channels, h, w)) * 0.015,
        "_tint": rng.uniform(0.8, 1.2, size=dims.channels) if dims.channels > 1 else np.ones(1),
    }


def shape_mask(scene: Mapping, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy = yy - scene["cy"]
    dx = xx - scene["cx"]
    r = scene["radius"]
    kind = scene["kind"]
    if kind == 0:
        m = (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    elif kind == 1:
        m = dy * dy + dx * dx <= r * r
    elif kind == 2:
        m = (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= 0.6 * (dy + r))
    else:
        arm = max(r / 3.0, 0.75)
        m = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    return m


def render_image(scene: Mapping, dims: ImageDims) -> np.ndarray:
    h, w = dims.height, dims.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    a = scene["stripe_angle"]
    proj = np.cos(a) * xx + np.sin(a) * yy
    bg = scene["base"] + scene["stripe_amp"] * np.sin(scene["stripe_freq"] * proj + scene["stripe_phase"])
    m = shape_mask(scene, h, w)
    plane = np.where(m, scene["base"] + scene["contrast"], bg)
    img = plane[None, :, :] * scene["_tint"][:, None, None] + scene["_grain"]
    return np.clip(img, 0.0, 1.0)


def _box_blur(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask.astype(np.float64), 1, mode="constant")
    h, w = mask.shape
    acc = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            acc += p[i:i + h, j:j + w]
    return acc / 9.0


def render_label(task: TaskSpec, scene: Mapping, dims: ImageDims):
    h, w = dims.height, dims.width
    m = shape_mask(scene, h, w)
    tid = task.task_id
    if tid == "shape":
        return int(scene["kind"])
    if tid == "quadrant":
        return int(scene["cy"] >= (h - 1) / 2) * 2 + int(scene["cx"] >= (w - 1) / 2)
    if tid == "brightness":
        return int(scene["level"])
    if tid == "mask":
        return m.astype(np.int64)
    if tid == "region":
        p = np.pad(m, 1, mode="constant")
        inner = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
        out = np.zeros((h, w), dtype=np.int64)
        out[m] = 2
        out[m & inner] = 1
        return out
    if tid == "halves":
        xx = np.arange(w)[None, :].repeat(h, axis=0)
        out = np.zeros((h, w), dtype=np.int64)
        out[m & (xx < scene["cx"])] = 1
        out[m & (xx >= scene["cx"])] = 2
        return out
    if tid == "centroid":
        ys, xs = np.nonzero(m)
        if ys.size == 0:
            return np.array([scene["cy"] / (h - 1), scene["cx"] / (w - 1)])
        return np.array([ys.mean() / (h - 1), xs.mean() / (w - 1)])
    if tid == "density":
        return _box_blur(m)
    if tid == "area":
        return np.array([4.0 * m.sum() / (h * w)])
    if tid == "contrast":
        return np.array([4.0 * scene["contrast"]])
    raise UnknownTask(tid)


# ---------------------------------------------------------------- datasets

@dataclass
class SplitData:
    images: np.ndarray  # (n, C, H, W) float64 in [0, 1]
    labels: dict[str, np.ndarray]
    indices: np.ndarray  # global scene indices

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class DatasetSplit:
    train: SplitData
    test: SplitData
    seed: int
    dims: ImageDims
    tasks: list[TaskSpec] = field(default_factory=list)

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise UnknownTask(task_id)

    @property
    def seen(self) -> list[TaskSpec]:
        return [t for t in self.tasks if t.seen]

    @property
    def unseen(self) -> list[TaskSpec]:
        return [t for t in self.tasks if not t.seen]

    def with_train_images(self, images: np.ndarray) -> "DatasetSplit":
        train = SplitData(images, self.train.labels, self.train.indices)
        return DatasetSplit(train, self.test, self.seed, self.dims, self.tasks)


def _label_array(task: TaskSpec, values: list) -> np.ndarray:
    if task.label_kind in (IMAGE_CLASS, PIXEL_CLASS):
        return np.asarray(values, dtype=np.int64)
    arr = np.asarray(values, dtype=np.float64)
    if task.label_kind == PIXEL_REGRESSION:
        return arr
    return arr.reshape(len(values), -1)


def render_split(seed: int, indices: Sequence[int], dims: ImageDims, tasks: Sequence[TaskSpec]) -> SplitData:
    images = np.empty((len(indices), *dims.shape))
    raw = {t.task_id: [] for t in tasks}
    for k, idx in enumerate(indices):
        scene = sample_scene(seed, idx, dims)
        images[k] = render_image(scene, dims)
        for t in tasks:
            raw[t.task_id].append(render_label(t, scene, dims))
    labels = {t.task_id: _label_array(t, raw[t.task_id]) for t in tasks}
    return SplitData(images, labels, np.asarray(indices, dtype=np.int64))


def make_suite(
    seed: int = 0,
    num_seen: int = 6,
    num_unseen: int = 2,
    dims: ImageDims = ImageDims(),
    n_train: int = 512,
    n_test: int = 256,
) -> tuple[list[TaskSpec], DatasetSplit]:
    tasks = task_catalog(num_seen, num_unseen)
    if n_train < 1 or n_test < 1:
        raise BadConfig("split sizes must be positive")
    train = render_split(seed, range(n_train), dims, tasks)
    test = render_split(seed, range(n_train, n_train + n_test), dims, tasks)
    return tasks, DatasetSplit(train, test, seed, dims, tasks)


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    images: np.ndarray
    labels: dict[str, np.ndarray]
    indices: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    def for_task(self, task_id: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.images, self.labels[task_id]
        except KeyError:
            raise UnknownTask(task_id) from None


def _take(data: SplitData, rows: np.ndarray, task_ids) -> Batch:
    if task_ids is None:
        task_ids = list(data.labels)
    labels = {}
    for t in task_ids:
        if t not in data.labels:
            raise UnknownTask(t)
        labels[t] = data.labels[t][rows]
    return Batch(data.images[rows], labels, data.indices[rows])


def iter_epoch(data: SplitData, batch_size: int, rng: np.random.Generator, task_ids=None) -> Iterator[Batch]:
    """One epoch of without-replacement batches; the last one may be short."""
    if batch_size < 1:
        raise BadConfig("batch_size must be >= 1")
    order = rng.permutation(len(data))
    for start in range(0, len(order), batch_size):
        yield _take(data, order[start:start + batch_size], task_ids)


def sample_batch(split: DatasetSplit, task_id: str, batch_size: int, rng: np.random.Generator) -> Batch:
    """First batch of a fresh epoch ordering drawn from ``rng``."""
    split.task(task_id)
    return next(iter_epoch(split.train, batch_size, rng, [task_id]))


# ---------------------------------------------------------------- export

MAGIC = b"UEGDSET\x00"
FORMAT_VERSION = 1
_KIND_CODES = {k: i for i, k in enumerate(LABEL_KINDS)}


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    return buf[pos:pos + n].decode("utf-8"), pos + n


def export_split(data: SplitData, tasks: Sequence[TaskSpec], dims: ImageDims, path) -> None:
    """Write one split as a self-describing container (layout in docs/formats.md)."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IIIII", FORMAT_VERSION, len(data), dims.channels, dims.height, dims.width)
    out += struct.pack("<I", len(tasks))
    for t in tasks:
        out += _pack_str(t.task_id) + _pack_str(t.loss_kind) + _pack_str(t.metric_kind)
        out += struct.pack("<BBId", _KIND_CODES[t.label_kind], int(t.seen), t.out_dim, t.loss_weight)
    out += data.indices.astype("<i8").tobytes()
    out += data.images.astype("<f4").tobytes()
    for t in tasks:
        lab = data.labels[t.task_id]
        is_int = lab.dtype.kind in "iu"
        arr = lab.astype("<i4" if is_int else "<f4")
        out += struct.pack("<BB", 0 if is_int else 1, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(out)


def read_split(path) -> tuple[SplitData, list[TaskSpec], ImageDims]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(MAGIC) + 4 or buf[: len(MAGIC)] != MAGIC:
        raise ValueError("not a dataset container")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise ValueError("dataset container checksum mismatch")
    pos = len(MAGIC)
    version, n, c, h, w = struct.unpack_from("<IIIII", buf, pos)
    pos += 20
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    (n_tasks,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    kinds = {v: k for k, v in _KIND_CODES.items()}
    tasks = []
    for _ in range(n_tasks):
        tid, pos = _unpack_str(buf, pos)
        loss, pos = _unpack_str(buf, pos)
        metric, pos = _unpack_str(buf, pos)
        kind, seen, out_dim, weight = struct.unpack_from("<BBId", buf, pos)
        pos += 14
        tasks.append(TaskSpec(tid, kinds[kind], loss, metric, out_dim, bool(seen), weight))
    indices = np.frombuffer(buf, "<i8", n, pos).astype(np.int64)
    pos += 8 * n
    count = n * c * h * w
    images = np.frombuffer(buf, "<f4", count, pos).astype(np.float64).reshape(n, c, h, w)
    pos += 4 * count
    labels = {}
    for t in tasks:
        is_float, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape))
        dt = "<f4" if is_float else "<i4"
        arr = np.frombuffer(buf, dt, size, pos).reshape(shape)
        pos += 4 * size
        labels[t.task_id] = arr.astype(np.float64 if is_float else np.int64)
    return SplitData(images, labels, indices), tasks, ImageDims(c, h, w)
