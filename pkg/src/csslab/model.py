"""Per-pixel segmentation model: shared MLP backbone + growing classifier bank.

The backbone maps each pixel feature x (d or 2d with the context flag) to an
embedding z = W2 @ relu(W1 @ x + b1) + b2. The classifier bank is a list of
per-step linear blocks; concatenating block rows in step order yields the
logit matrix over the active classes, whose global row order is exactly the
class-id order (each step owns a consecutive id range). An optional future
block (strategy fixbc_p) appends rows for classes that have not arrived yet.

Parameters and optimizer state are float64 throughout; losses and gradients
are accumulated in double precision by the kernels. Freezing is a per-block
boolean; frozen arrays are never written, so their bytes stay identical
across steps.

Model checkpoints are a small versioned binary (see docs/formats.md).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .datagen import IGNORE, ClassSchedule, FeatureGrid
from .errors import FormatError, NumericError, RangeError, ShapeError, StateError
from .rng import RngStream

STRATEGIES = ("dft", "fixb", "fixbc", "fixbc_p", "joint")

# strategies where the backbone keeps training after step 1
_BACKBONE_TRAINS = ("dft", "joint")

PLACEHOLDER = -1  # future-row id before a class is assigned (oversize mode)

_CKPT_MAGIC = b"CSSM1\x00"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class Dims:
    feat_dim: int = 16
    hidden: int = 256
    embed: int = 32

    def __post_init__(self):
        if min(self.feat_dim, self.hidden, self.embed) < 1:
            raise ShapeError(f"all dims must be >= 1, got {self}")


@dataclass(frozen=True)
class Hyper:
    """Optimization knobs; probe training doubles epochs_per_step by default."""

    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    epochs_per_step: int = 40
    batch_size: int = 8
    poly_on: str = "lr"  # "lr" or "weight_decay"
    probe_epochs: int | None = None

    def __post_init__(self):
        if self.lr0 < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise RangeError(f"negative optimization constant in {self}")
        if self.epochs_per_step < 1 or self.batch_size < 1:
            raise RangeError(f"epochs_per_step and batch_size must be >= 1, got {self}")
        if self.poly_on not in ("lr", "weight_decay"):
            raise RangeError(f"poly_on must be lr or weight_decay, got {self.poly_on!r}")

    @property
    def probe_budget(self) -> int:
        return self.probe_epochs if self.probe_epochs else 2 * self.epochs_per_step


@dataclass
class Backbone:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    frozen: bool = False


@dataclass
class ClassifierBlock:
    step: int
    class_ids: tuple[int, ...]
    W: np.ndarray  # (len(class_ids), embed)
    b: np.ndarray
    frozen: bool = False


@dataclass
class FutureBlock:
    class_ids: tuple[int, ...]  # PLACEHOLDER entries allowed in oversize mode
    W: np.ndarray
    b: np.ndarray


@dataclass
class SegModel:
    dims: Dims
    strategy: str
    backbone: Backbone
    blocks: list[ClassifierBlock] = field(default_factory=list)
    future: FutureBlock | None = None
    current_step: int = 0
    context_mean: bool = False

    @property
    def input_dim(self) -> int:
        return self.dims.feat_dim * (2 if self.context_mean else 1)

    def learned_ids(self) -> tuple[int, ...]:
        out: list[int] = []
        for blk in self.blocks:
            out.extend(blk.class_ids)
        return tuple(out)


def init_model(dims: Dims, strategy: str, rng, context_mean: bool = False) -> SegModel:
    """Fresh untrained model; He-style backbone init, no classifier rows yet.

    Draw order from ``rng``: W1, then W2 (biases start at zero).
    """
    if strategy not in STRATEGIES:
        raise StateError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    d_in = dims.feat_dim * (2 if context_mean else 1)
    W1 = rng.normal(scale=np.sqrt(2.0 / d_in), size=(dims.hidden, d_in))
    W2 = rng.normal(scale=np.sqrt(2.0 / dims.hidden), size=(dims.embed, dims.hidden))
    backbone = Backbone(
        W1=W1,
        b1=np.zeros(dims.hidden),
        W2=W2,
        b2=np.zeros(dims.embed),
    )
    return SegModel(dims=dims, strategy=strategy, backbone=backbone, context_mean=context_mean)


# ---------------------------------------------------------------------------
# parameter plumbing


def params(model: SegModel) -> dict[str, np.ndarray]:
    """Live parameter arrays keyed 'component.field', declaration order."""
    out = {
        "backbone.W1": model.backbone.W1,
        "backbone.b1": model.backbone.b1,
        "backbone.W2": model.backbone.W2,
        "backbone.b2": model.backbone.b2,
    }
    for blk in model.blocks:
        out[f"block{blk.step}.W"] = blk.W
        out[f"block{blk.step}.b"] = blk.b
    if model.future is not None:
        out["future.W"] = model.future.W
        out["future.b"] = model.future.b
    return out


def component_of(name: str) -> str:
    return name.split(".", 1)[0]


def trainable_components(model: SegModel) -> set[str]:
    """Components currently marked trainable by the model's freeze flags."""
    mask = set()
    if not model.backbone.frozen:
        mask.add("backbone")
    for blk in model.blocks:
        if not blk.frozen:
            mask.add(f"block{blk.step}")
    if model.future is not None:
        mask.add("future")
    return mask


def count_trainable(model: SegModel, mask: set[str] | None = None) -> int:
    """Scalar entries in trainable components (freeze flags unless ``mask``)."""
    if mask is None:
        mask = trainable_components(model)
    return sum(a.size for name, a in params(model).items() if component_of(name) in mask)


def stacked_rows(model: SegModel, include_future: bool = True):
    """Concatenated classifier rows (K, e), biases (K,), and the class ids.

    Row order is block declaration order, which the expansion rules keep
    equal to ascending class-id order for real classes.
    """
    Ws = [blk.W for blk in model.blocks]
    bs = [blk.b for blk in model.blocks]
    ids: list[int] = list(model.learned_ids())
    if include_future and model.future is not None:
        Ws.append(model.future.W)
        bs.append(model.future.b)
        ids.extend(model.future.class_ids)
    if not Ws:
        raise StateError("model has no classifier rows yet")
    return np.concatenate(Ws, axis=0), np.concatenate(bs, axis=0), tuple(ids)


def _row_spans(model: SegModel, include_future: bool):
    spans = []
    start = 0
    for blk in model.blocks:
        n = len(blk.class_ids)
        spans.append((f"block{blk.step}", start, start + n))
        start += n
    if include_future and model.future is not None:
        n = len(model.future.class_ids)
        spans.append(("future", start, start + n))
    return spans


# ---------------------------------------------------------------------------
# forward paths


def augment_context(features: np.ndarray) -> np.ndarray:
    """Append the 3x3 local mean of the feature field (edges use fewer cells)."""
    H, W, d = features.shape
    x = features.astype(np.float64)
    sums = np.zeros_like(x)
    counts = np.zeros((H, W, 1))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ys = slice(max(dy, 0), H + min(dy, 0))
            xs = slice(max(dx, 0), W + min(dx, 0))
            yt = slice(max(-dy, 0), H + min(-dy, 0))
            xt = slice(max(-dx, 0), W + min(-dx, 0))
            sums[yt, xt] += x[ys, xs]
            counts[yt, xt] += 1.0
    return np.concatenate([x, sums / counts], axis=2)


def pixel_matrix(model: SegModel, features: np.ndarray) -> np.ndarray:
    """(H, W, d) float feature grid -> (H*W, d_in) float64 kernel input."""
    if features.ndim != 3:
        raise ShapeError(f"expected (H, W, d) features, got {features.shape}")
    if features.shape[2] != model.dims.feat_dim:
        raise ShapeError(
            f"feature dim {features.shape[2]} != model feat_dim {model.dims.feat_dim}"
        )
    x = augment_context(features) if model.context_mean else features
    return np.ascontiguousarray(x.reshape(-1, model.input_dim), dtype=np.float64)


def embed(model: SegModel, grid) -> np.ndarray:
    """Backbone embeddings for one grid, shape (H, W, embed)."""
    features = grid.features if isinstance(grid, FeatureGrid) else np.asarray(grid)
    X = pixel_matrix(model, features)
    bb = model.backbone
    Z = kernels.embed(X, bb.W1, bb.b1, bb.W2, bb.b2)
    return Z.reshape(features.shape[0], features.shape[1], model.dims.embed)


def forward(model: SegModel, grid) -> np.ndarray:
    """Logits over the K active classes, shape (H, W, K).

    Active means every learned class plus pre-allocated future rows when
    present; evaluation paths slice off future rows before taking argmax.
    """
    features = grid.features if isinstance(grid, FeatureGrid) else np.asarray(grid)
    Z = embed(model, features).reshape(-1, model.dims.embed)
    CW, cb, _ = stacked_rows(model)
    logits = Z @ CW.T + cb
    return logits.reshape(features.shape[0], features.shape[1], CW.shape[0])


def batch_arrays(model: SegModel, grids) -> tuple[np.ndarray, np.ndarray]:
    """Stack grids into kernel inputs; IGNORE labels become -1."""
    Xs, ys = [], []
    for g in grids:
        Xs.append(pixel_matrix(model, g.features))
        lab = g.labels.reshape(-1).astype(np.int64)
        ys.append(np.where(lab == IGNORE, -1, lab))
    return np.concatenate(Xs, axis=0), np.concatenate(ys, axis=0)


def loss_and_grads(model: SegModel, grids, trainable_mask: set[str]):
    """Mean softmax cross-entropy over non-IGNORE pixels and its gradients.

    Labels must already live in the local row space (0..K-1 in class-id
    order). Gradient entries for components outside ``trainable_mask`` are
    returned as zeros. Raises on empty batches and non-finite results.
    """
    X, y = batch_arrays(model, grids)
    return _loss_and_grads_arrays(model, X, y, trainable_mask)


def _loss_and_grads_arrays(model: SegModel, X, y, trainable_mask):
    CW, cb, ids = stacked_rows(model)
    K = CW.shape[0]
    if y.max(initial=-1) >= K:
        raise RangeError(f"label {int(y.max())} outside the {K} active rows")
    bb = model.backbone
    loss_sum, n, dW1, db1, dW2, db2, dCW, dcb = kernels.train_full(
        X, y, bb.W1, bb.b1, bb.W2, bb.b2, CW, cb
    )
    if n == 0:
        raise RangeError("batch has no non-IGNORE pixels")
    if not np.isfinite(loss_sum):
        raise NumericError(f"non-finite loss; offending block: {_first_bad_block(model)}")
    inv = 1.0 / n
    grads = {
        "backbone.W1": dW1 * inv,
        "backbone.b1": db1 * inv,
        "backbone.W2": dW2 * inv,
        "backbone.b2": db2 * inv,
    }
    for name, lo, hi in _row_spans(model, include_future=True):
        grads[f"{name}.W"] = dCW[lo:hi] * inv
        grads[f"{name}.b"] = dcb[lo:hi] * inv
    for name in grads:
        if component_of(name) not in trainable_mask:
            grads[name] = np.zeros_like(grads[name])
    return float(loss_sum * inv), grads


def _first_bad_block(model: SegModel) -> str:
    for name, arr in params(model).items():
        if not np.all(np.isfinite(arr)):
            return component_of(name)
    return "inputs"


# ---------------------------------------------------------------------------
# optimization


def poly_lr(lr0: float, iteration: int, total_iters: int, power: float) -> float:
    """lr0 * (1 - iteration/total_iters) ** power."""
    if total_iters < 1:
        raise RangeError(f"total_iters must be >= 1, got {total_iters}")
    if not 0 <= iteration <= total_iters:
        raise RangeError(f"iteration {iteration} outside 0..{total_iters}")
    if lr0 < 0 or power <= 0:
        raise RangeError(f"need lr0 >= 0 and power > 0, got lr0={lr0} power={power}")
    return lr0 * (1.0 - iteration / total_iters) ** power


def sgd_step(params_d, grads, velocity, lr, momentum, weight_decay, trainable_mask):
    """In-place heavy-ball update: v = m*v + g + wd*w; w -= lr*v.

    Arrays of components outside ``trainable_mask`` are not touched at all,
    so frozen parameters (and their velocity) stay bit-identical.
    """
    for name, w in params_d.items():
        if component_of(name) not in trainable_mask:
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {component_of(name)}")
        v = velocity[name]
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * w
        w -= lr * v
    return params_d, velocity


# ---------------------------------------------------------------------------
# bank growth


def expand_classifier(model: SegModel, new_class_ids, rng) -> None:
    """Append a block for the entered step; N(0, 0.01^2) weights, zero bias.

    No-op for an empty id list. Ids must be new and keep the global row
    order equal to class-id order.
    """
    ids = tuple(int(c) for c in new_class_ids)
    if not ids:
        return
    taken = set(model.learned_ids())
    dup = taken.intersection(ids)
    if dup:
        raise StateError(f"classes already present: {sorted(dup)}")
    last = max(taken) if taken else -1
    if min(ids) <= last:
        raise StateError(
            f"new ids {ids} would break ascending row order (last learned id {last})"
        )
    e = model.dims.embed
    W = rng.normal(scale=0.01, size=(len(ids), e))
    model.blocks.append(
        ClassifierBlock(step=model.current_step + 1, class_ids=ids, W=W, b=np.zeros(len(ids)))
    )


def preallocate_future(model: SegModel, schedule: ClassSchedule, rng) -> None:
    """Create rows for every not-yet-learned class (strategy fixbc_p).

    At the last step there is nothing left to allocate: warns and returns.
    """
    if model.strategy != "fixbc_p":
        raise StateError(f"future rows only exist under fixbc_p, not {model.strategy}")
    remaining = [c for c in schedule.classes_after(model.current_step + 1)]
    if not remaining:
        warnings.warn("nothing to pre-allocate at the final step", stacklevel=2)
        return
    if model.future is not None:
        raise StateError("future block already allocated")
    e = model.dims.embed
    W = rng.normal(scale=0.01, size=(len(remaining), e))
    model.future = FutureBlock(class_ids=tuple(remaining), W=W, b=np.zeros(len(remaining)))


def make_future_pool(model: SegModel, n_rows: int, rng) -> None:
    """Oversize mode: allocate ``n_rows`` anonymous future rows."""
    if model.future is not None:
        raise StateError("future block already allocated")
    e = model.dims.embed
    model.future = FutureBlock(
        class_ids=(PLACEHOLDER,) * n_rows,
        W=rng.normal(scale=0.01, size=(n_rows, e)),
        b=np.zeros(n_rows),
    )


def promote_future(model: SegModel, class_ids, rng=None, refill: int = 0) -> None:
    """Move future rows into a regular block for the entered step.

    Schedule mode: rows are looked up by real class id. Oversize mode
    (placeholder ids): the first ``len(class_ids)`` rows are assigned in row
    order and the pool is refilled with ``refill`` fresh rows drawn from
    ``rng``. Either way the moved rows keep their trained values.
    """
    if model.future is None:
        raise StateError("no future block to promote from")
    ids = tuple(int(c) for c in class_ids)
    fut = model.future
    if PLACEHOLDER in fut.class_ids:
        if len(ids) > len(fut.class_ids):
            raise StateError(
                f"pool of {len(fut.class_ids)} rows cannot cover {len(ids)} new classes"
            )
        take = list(range(len(ids)))
    else:
        pos = {c: i for i, c in enumerate(fut.class_ids)}
        missing = [c for c in ids if c not in pos]
        if missing:
            raise StateError(f"classes {missing} not present in the future block")
        take = [pos[c] for c in ids]
    keep = [i for i in range(len(fut.class_ids)) if i not in set(take)]
    W = fut.W[take].copy()
    b = fut.b[take].copy()
    model.blocks.append(
        ClassifierBlock(step=model.current_step + 1, class_ids=ids, W=W, b=b)
    )
    if keep:
        model.future = FutureBlock(
            class_ids=tuple(fut.class_ids[i] for i in keep),
            W=fut.W[keep].copy(),
            b=fut.b[keep].copy(),
        )
    else:
        model.future = None
    if refill:
        if rng is None:
            raise StateError("refill requested without an rng")
        e = model.dims.embed
        pool = model.future
        newW = rng.normal(scale=0.01, size=(refill, e))
        if pool is None:
            model.future = FutureBlock(
                class_ids=(PLACEHOLDER,) * refill, W=newW, b=np.zeros(refill)
            )
        else:
            model.future = FutureBlock(
                class_ids=pool.class_ids + (PLACEHOLDER,) * refill,
                W=np.concatenate([pool.W, newW], axis=0),
                b=np.concatenate([pool.b, np.zeros(refill)]),
            )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: SegModel, path) -> None:
    """Versioned binary dump; layout in docs/formats.md, doubles LE."""
    out = bytearray()
    out += _CKPT_MAGIC
    out += struct.pack(
        "<IIIIII",
        _CKPT_VERSION,
        STRATEGIES.index(model.strategy),
        model.current_step,
        model.dims.feat_dim,
        model.dims.hidden,
        model.dims.embed,
    )
    out += struct.pack("<BBI", int(model.context_mean), int(model.backbone.frozen), len(model.blocks))
    for arr in (model.backbone.W1, model.backbone.b1, model.backbone.W2, model.backbone.b2):
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    for blk in model.blocks:
        out += struct.pack("<IIB", blk.step, len(blk.class_ids), int(blk.frozen))
        out += np.asarray(blk.class_ids, dtype="<u4").tobytes()
        out += np.ascontiguousarray(blk.W, dtype="<f8").tobytes()
        out += np.ascontiguousarray(blk.b, dtype="<f8").tobytes()
    if model.future is None:
        out += struct.pack("<BI", 0, 0)
    else:
        out += struct.pack("<BI", 1, len(model.future.class_ids))
        out += np.asarray(model.future.class_ids, dtype="<i4").tobytes()
        out += np.ascontiguousarray(model.future.W, dtype="<f8").tobytes()
        out += np.ascontiguousarray(model.future.b, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(f"truncated checkpoint at offset {self.off} in {self.path}")
        chunk = self.blob[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, count, shape):
        a = np.frombuffer(self.take(count * np.dtype(dtype).itemsize), dtype=dtype, count=count)
        return a.reshape(shape).astype(np.float64) if np.dtype(dtype).kind == "f" else a.reshape(shape)


def load_checkpoint(path) -> SegModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0 in {path}")
    r = _Reader(blob, path)
    r.take(len(_CKPT_MAGIC))
    version, strat_code, step, d, eh, e = r.unpack("<IIIIII")
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} in {path}")
    if strat_code >= len(STRATEGIES):
        raise FormatError(f"unknown strategy code {strat_code} in {path}")
    context, bfrozen, n_blocks = r.unpack("<BBI")
    dims = Dims(feat_dim=d, hidden=eh, embed=e)
    d_in = d * (2 if context else 1)
    backbone = Backbone(
        W1=r.array("<f8", eh * d_in, (eh, d_in)),
        b1=r.array("<f8", eh, (eh,)),
        W2=r.array("<f8", e * eh, (e, eh)),
        b2=r.array("<f8", e, (e,)),
        frozen=bool(bfrozen),
    )
    blocks = []
    for _ in range(n_blocks):
        bstep, n, frozen = r.unpack("<IIB")
        ids = tuple(int(c) for c in r.array("<u4", n, (n,)))
        W = r.array("<f8", n * e, (n, e))
        b = r.array("<f8", n, (n,))
        blocks.append(ClassifierBlock(step=bstep, class_ids=ids, W=W, b=b, frozen=bool(frozen)))
    has_future, n = r.unpack("<BI")
    future = None
    if has_future:
        ids = tuple(int(c) for c in r.array("<i4", n, (n,)))
        W = r.array("<f8", n * e, (n, e))
        b = r.array("<f8", n, (n,))
        future = FutureBlock(class_ids=ids, W=W, b=b)
    if r.off != len(blob):
        raise FormatError(f"{len(blob) - r.off} trailing bytes at offset {r.off} in {path}")
    return SegModel(
        dims=dims,
        strategy=STRATEGIES[strat_code],
        backbone=backbone,
        blocks=blocks,
        future=future,
        current_step=step,
        context_mean=bool(context),
    )
