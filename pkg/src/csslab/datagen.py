"""Synthetic feature-grid benchmarks and their incremental task streams.

A dataset is a pair of image collections (train, eval). Every image is a
``FeatureGrid``: an H x W grid where each pixel carries a d-dim feature
vector and an integer class label. Class 0 is background; foreground classes
are 1..N; label 65535 (``IGNORE``) marks pixels excluded from every loss and
metric.

Generation recipe, in draw order (all streams derived from one seed, see
``csslab.rng``):

1. ``child("means")`` - one unit-norm mean vector per class id 0..N.
2. ``child("mixing")`` - ``mixing_depth`` frozen random tanh layers.
3. Per image ``child("image", split, index)`` - object count, then class and
   rectangle geometry per extra object, then the anchor rectangle geometry,
   then the per-pixel Gaussian noise field.

Each image is anchored to class ``(index % N) + 1``; the anchor rectangle is
painted last so the class is guaranteed visible. Later rectangles overwrite
earlier ones. Pixel features are ``mix(mean[label] + noise)`` where ``mix``
applies the frozen tanh layers (identity when ``mixing_depth = 0``).

The on-disk format (CSSF) and the schedule / task-stream machinery for
incremental training also live here; see ``docs/formats.md`` for the exact
byte layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    FormatError,
    GenerationError,
    NumericError,
    ScheduleError,
    ShapeError,
    StreamError,
)
from .rng import RngStream

IGNORE = 65535

_MAGIC = b"CSSF1\x00"
_HEADER = struct.Struct("<IIIII")  # num_images, height, width, feat_dim, n_classes


@dataclass
class FeatureGrid:
    """One image: per-pixel features (H, W, d) float32, labels (H, W) uint16."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        f, l = self.features, self.labels
        if f.ndim != 3:
            raise ShapeError(f"features must be (H, W, d), got shape {f.shape}")
        if l.shape != f.shape[:2]:
            raise ShapeError(
                f"labels shape {l.shape} does not match feature grid {f.shape[:2]}"
            )
        if f.dtype != np.float32:
            raise ShapeError(f"features must be float32, got {f.dtype}")
        if l.dtype != np.uint16:
            raise ShapeError(f"labels must be uint16, got {l.dtype}")
        if not np.all(np.isfinite(f)):
            raise NumericError("non-finite feature values")

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.features.shape[2]


@dataclass
class GridCollection(Sequence):
    """A list of same-extent grids plus the foreground class count N."""

    grids: list[FeatureGrid]
    n_classes: int

    def __len__(self) -> int:
        return len(self.grids)

    def __getitem__(self, i):
        return self.grids[i]

    def __iter__(self) -> Iterator[FeatureGrid]:
        return iter(self.grids)


class Dataset(NamedTuple):
    train: GridCollection
    eval: GridCollection


# ---------------------------------------------------------------------------
# class schedules


@dataclass(frozen=True)
class ClassSchedule:
    """Partition of class ids over learning steps.

    ``steps[0]`` holds background 0 plus the initial foreground classes;
    every later step holds a block of consecutive new classes. Steps are
    1-based everywhere in logs and APIs.
    """

    steps: tuple[tuple[int, ...], ...]
    setting: str

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def total_classes(self) -> int:
        """Foreground class count N (background excluded)."""
        return sum(len(s) for s in self.steps) - 1

    def classes_of(self, step: int) -> tuple[int, ...]:
        if not 1 <= step <= self.num_steps:
            raise ScheduleError(f"step {step} outside 1..{self.num_steps}")
        return self.steps[step - 1]

    def classes_through(self, step: int) -> tuple[int, ...]:
        """All class ids of steps 1..step, ascending."""
        out: list[int] = []
        for s in self.steps[:step]:
            out.extend(s)
        return tuple(sorted(out))

    def classes_after(self, step: int) -> tuple[int, ...]:
        """Foreground ids of steps step+1..T, ascending."""
        out: list[int] = []
        for s in self.steps[step:]:
            out.extend(s)
        return tuple(sorted(out))


def build_schedule(setting, total_classes: int) -> ClassSchedule:
    """Build a schedule from an "X-Y" string or an explicit per-step list.

    "X-Y" means X initial foreground classes then Y per increment; the
    remainder (total - X) must divide evenly by Y. An explicit list gives
    the foreground class count of every step and must sum to the total.
    Background 0 always joins the first step.
    """
    if total_classes < 1:
        raise ScheduleError(f"need at least 1 foreground class, got {total_classes}")

    if isinstance(setting, str):
        parts = setting.split("-")
        if len(parts) != 2:
            raise ScheduleError(f"setting must look like 'X-Y', got {setting!r}")
        try:
            first, inc = int(parts[0]), int(parts[1])
        except ValueError:
            raise ScheduleError(f"setting must be two integers, got {setting!r}") from None
        if first < 1 or inc < 1:
            raise ScheduleError(f"setting values must be >= 1, got {setting!r}")
        rest = total_classes - first
        if rest < 0:
            raise ScheduleError(
                f"initial block {first} exceeds total classes {total_classes}"
            )
        if rest % inc != 0:
            raise ScheduleError(
                f"{total_classes} classes cannot be split as {setting!r}: "
                f"remainder {rest} not divisible by {inc}"
            )
        sizes = [first] + [inc] * (rest // inc)
        label = setting
    else:
        sizes = [int(x) for x in setting]
        if not sizes or any(x < 1 for x in sizes):
            raise ScheduleError(f"step sizes must be positive, got {sizes}")
        if sum(sizes) != total_classes:
            raise ScheduleError(
                f"step sizes {sizes} sum to {sum(sizes)}, expected {total_classes}"
            )
        label = "+".join(str(x) for x in sizes)

    steps: list[tuple[int, ...]] = []
    nxt = 1
    for t, size in enumerate(sizes):
        ids = tuple(range(nxt, nxt + size))
        nxt += size
        steps.append(((0,) + ids) if t == 0 else ids)
    return ClassSchedule(steps=tuple(steps), setting=label)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SynthParams:
    """Knobs for the synthetic benchmark generator (desk-scale defaults)."""

    num_classes: int
    seed: int
    feat_dim: int = 16
    height: int = 16
    width: int = 16
    images_per_class: int = 12
    objects_per_image: tuple[int, int] = (2, 4)
    noise_sigma: float = 0.1
    mixing_depth: int = 1

    def __post_init__(self):
        if self.num_classes < 1:
            raise GenerationError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.feat_dim < 1:
            raise GenerationError(f"feat_dim must be >= 1, got {self.feat_dim}")
        if self.images_per_class < 1:
            raise GenerationError(
                f"images_per_class must be >= 1, got {self.images_per_class}"
            )
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise GenerationError(f"bad objects_per_image range {self.objects_per_image}")
        if self.noise_sigma < 0:
            raise GenerationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.mixing_depth < 0:
            raise GenerationError(f"mixing_depth must be >= 0, got {self.mixing_depth}")
        if self.height < 4 or self.width < 4:
            raise GenerationError(
                f"grid {self.height}x{self.width} too small to place objects "
                "(need at least 4x4)"
            )


def class_means(params: SynthParams, stream: RngStream) -> np.ndarray:
    """Unit-norm mean vector per class id 0..N, shape (N+1, d)."""
    rng = stream.child("means")
    m = rng.normal(size=(params.num_classes + 1, params.feat_dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def mixing_layers(params: SynthParams, stream: RngStream) -> list[tuple[np.ndarray, np.ndarray]]:
    """Frozen tanh layers x -> tanh(A x + c) with orthogonal A.

    Orthogonality keeps every class-difference direction at full scale, so
    the mixing entangles coordinates without collapsing separability.
    """
    rng = stream.child("mixing")
    d = params.feat_dim
    layers = []
    for _ in range(params.mixing_depth):
        A, _ = np.linalg.qr(rng.normal(size=(d, d)))
        c = rng.normal(scale=0.1, size=d)
        layers.append((A, c))
    return layers


def place_objects(params: SynthParams, split: int, index: int, rng) -> list[tuple[int, int, int, int, int]]:
    """Rectangle list (class_id, y0, x0, h, w) in paint order, anchor last.

    Consumes from ``rng`` in the documented order; the caller passes the
    image's child stream and afterwards draws the noise field from the same
    stream.
    """
    H, W, N = params.height, params.width, params.num_classes
    lo, hi = params.objects_per_image
    min_h, max_h = max(2, H // 4), max(2, H // 2)
    min_w, max_w = max(2, W // 4), max(2, W // 2)

    def rect() -> tuple[int, int, int, int]:
        h = int(rng.integers(min_h, max_h + 1))
        w = int(rng.integers(min_w, max_w + 1))
        y0 = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, W - w + 1))
        return y0, x0, h, w

    n_obj = int(rng.integers(lo, hi + 1))
    rects = []
    for _ in range(n_obj - 1):
        cls = int(rng.integers(1, N + 1))
        rects.append((cls,) + rect())
    # last object anchors a deterministic class so every class keeps at
    # least one training and one eval occurrence regardless of draw luck
    anchor = (index % N) + 1
    rects.append((anchor,) + rect())
    return rects


def _paint(params: SynthParams, rects) -> np.ndarray:
    labels = np.zeros((params.height, params.width), dtype=np.uint16)
    for cls, y0, x0, h, w in rects:
        labels[y0 : y0 + h, x0 : x0 + w] = cls
    return labels


def _features_for(labels, means, layers, sigma, rng) -> np.ndarray:
    x = means[labels.astype(np.int64)]
    if sigma > 0:
        x = x + rng.normal(scale=sigma, size=x.shape)
    for A, c in layers:
        x = np.tanh(x @ A.T + c)
    return x.astype(np.float32)


def generate_dataset(params: SynthParams) -> Dataset:
    """Deterministic synthetic dataset; see module docstring for the recipe."""
    stream = RngStream(params.seed)
    means = class_means(params, stream)
    layers = mixing_layers(params, stream)

    def build(split: int, per_class: int) -> GridCollection:
        grids = []
        for i in range(params.num_classes * per_class):
            rng = stream.child("image", split, i)
            rects = place_objects(params, split, i, rng)
            labels = _paint(params, rects)
            feats = _features_for(labels, means, layers, params.noise_sigma, rng)
            grids.append(FeatureGrid(features=feats, labels=labels))
        return GridCollection(grids=grids, n_classes=params.num_classes)

    train = build(0, params.images_per_class)
    eval_set = build(1, max(1, params.images_per_class // 2))
    return Dataset(train=train, eval=eval_set)


# ---------------------------------------------------------------------------
# relabeling and task streams


def relabel(labels: np.ndarray, keep) -> np.ndarray:
    """Map classes outside ``keep`` to background 0; IGNORE passes through."""
    top = int(labels.max(initial=0))
    if top == IGNORE:
        fg = labels[labels != IGNORE]
        top = int(fg.max(initial=0))
    lut = np.zeros(top + 1, dtype=np.uint16)
    for c in keep:
        if c <= top:
            lut[c] = c
    out = np.where(labels == IGNORE, labels, lut[np.minimum(labels, top)])
    return out.astype(np.uint16)


@dataclass
class StepTask:
    step: int
    classes: tuple[int, ...]
    grids: list[FeatureGrid]


@dataclass
class TaskStream:
    """Per-step training collections plus the shared untouched eval set."""

    steps: list[StepTask]
    eval: GridCollection
    schedule: ClassSchedule
    scenario: str


def make_task_stream(dataset: Dataset, schedule: ClassSchedule, scenario: str = "overlapped") -> TaskStream:
    """Relabel the train split per step; labels outside C^t become background.

    ``overlapped`` keeps every image at every step. ``disjoint`` drops, at
    step t, any image containing pixels of a foreground class from a later
    step; background never disqualifies an image.
    """
    if scenario not in ("overlapped", "disjoint"):
        raise StreamError(f"scenario must be overlapped or disjoint, got {scenario!r}")
    train, eval_set = dataset.train, dataset.eval
    steps: list[StepTask] = []
    for t in range(1, schedule.num_steps + 1):
        current = schedule.classes_of(t)
        future = set(schedule.classes_after(t))
        grids = []
        for g in train:
            if scenario == "disjoint" and future:
                present = np.unique(g.labels)
                if any(int(c) in future for c in present):
                    continue
            grids.append(FeatureGrid(features=g.features, labels=relabel(g.labels, current)))
        if not grids:
            raise StreamError(
                f"step {t} has no training images left under scenario {scenario!r}"
            )
        steps.append(StepTask(step=t, classes=current, grids=grids))
    return TaskStream(steps=steps, eval=eval_set, schedule=schedule, scenario=scenario)


# ---------------------------------------------------------------------------
# CSSF container format


def save_cssf(collection: GridCollection, path) -> None:
    """Write one collection; layout documented in docs/formats.md."""
    grids = list(collection)
    if not grids:
        raise FormatError("refusing to write an empty collection")
    H, W, d = grids[0].height, grids[0].width, grids[0].feat_dim
    for i, g in enumerate(grids):
        if (g.height, g.width, g.feat_dim) != (H, W, d):
            raise FormatError(
                f"image {i} extent {(g.height, g.width, g.feat_dim)} "
                f"differs from first image {(H, W, d)}"
            )
        bad = (g.labels > collection.n_classes) & (g.labels != IGNORE)
        if bad.any():
            raise FormatError(
                f"image {i} has label {int(g.labels[bad][0])} outside "
                f"0..{collection.n_classes}"
            )
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(_HEADER.pack(len(grids), H, W, d, collection.n_classes))
        for g in grids:
            f.write(np.ascontiguousarray(g.features, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(g.labels, dtype="<u2").tobytes())


def load_cssf(path) -> GridCollection:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"bad magic at offset 0 in {path}")
    off = len(_MAGIC)
    if len(blob) < off + _HEADER.size:
        raise FormatError(f"truncated header at offset {len(blob)} in {path}")
    num, H, W, d, n_classes = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    if min(H, W, d) < 1:
        raise FormatError(f"degenerate extents {(H, W, d)} in header of {path}")
    feat_bytes = H * W * d * 4
    label_bytes = H * W * 2
    grids = []
    for i in range(num):
        end = off + feat_bytes + label_bytes
        if len(blob) < end:
            raise FormatError(
                f"truncated payload for image {i} at offset {off} in {path}"
            )
        feats = np.frombuffer(blob, dtype="<f4", count=H * W * d, offset=off)
        labels = np.frombuffer(blob, dtype="<u2", count=H * W, offset=off + feat_bytes)
        off = end
        labels = labels.reshape(H, W).copy()
        bad = (labels > n_classes) & (labels != IGNORE)
        if bad.any():
            raise FormatError(
                f"image {i} has label {int(labels[bad][0])} outside 0..{n_classes} in {path}"
            )
        grids.append(
            FeatureGrid(
                features=feats.reshape(H, W, d).astype(np.float32),
                labels=labels,
            )
        )
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes at offset {off} in {path}")
    return GridCollection(grids=grids, n_classes=n_classes)
