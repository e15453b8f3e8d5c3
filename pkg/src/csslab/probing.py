"""Linear probing of frozen backbones.

After any step, a fresh linear head over every scheduled class (background
included) is trained on the ORIGINAL labels of the full training split while
the backbone stays untouched, then evaluated over all classes. High probe
mIoU with poor observed mIoU means the representation still separates the
classes and the continual damage lives in the classifier.

The probe reuses the experiment's optimizer mechanics (SGD with momentum,
weight decay, per-run poly schedule) with double the per-step epoch budget
by default (``Hyper.probe_epochs`` overrides). Embeddings are computed once
per image up front; the backbone is only ever read.

Draw order from the probe rng: head init first, then one image permutation
per epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .datagen import IGNORE, ClassSchedule
from .errors import NumericError, ProbeError
from .metrics import MetricsReport, miou_groups
from .model import Hyper, SegModel, embed, poly_lr


@dataclass
class ProbeHead:
    step: int  # the step whose backbone this probe was trained on
    class_ids: tuple[int, ...]
    W: np.ndarray
    b: np.ndarray


def _embed_flat(model: SegModel, grid) -> np.ndarray:
    return embed(model, grid).reshape(-1, model.dims.embed)


def _rows_from_labels(labels, lut) -> np.ndarray:
    y = labels.reshape(-1).astype(np.int64)
    return np.where(y == IGNORE, -1, lut[np.where(y == IGNORE, 0, y)])


def train_probe(model: SegModel, train_grids, schedule: ClassSchedule, hyper: Hyper, rng) -> ProbeHead:
    """Fit an all-class linear head on frozen embeddings of the train split."""
    ids = schedule.classes_through(schedule.num_steps)
    lut = np.full(max(ids) + 1, -1, dtype=np.int64)
    for i, c in enumerate(ids):
        lut[c] = i

    Zs = [_embed_flat(model, g) for g in train_grids]
    ys = [_rows_from_labels(g.labels, lut) for g in train_grids]

    present = np.zeros(len(ids), dtype=bool)
    for y in ys:
        present[np.unique(y[y >= 0])] = True
    if not present.all():
        missing = ids[int(np.nonzero(~present)[0][0])]
        raise ProbeError(f"class {missing} has no training pixels to probe with")

    e = model.dims.embed
    W = rng.normal(scale=0.01, size=(len(ids), e))
    b = np.zeros(len(ids))
    vW = np.zeros_like(W)
    vb = np.zeros_like(b)

    n_images = len(Zs)
    per_epoch = math.ceil(n_images / hyper.batch_size)
    epochs = hyper.probe_budget
    total_iters = epochs * per_epoch

    it = 0
    for _ in range(epochs):
        order = rng.permutation(n_images)
        for k in range(per_epoch):
            idx = order[k * hyper.batch_size : (k + 1) * hyper.batch_size]
            Z = np.concatenate([Zs[i] for i in idx], axis=0)
            y = np.concatenate([ys[i] for i in idx], axis=0)
            if hyper.poly_on == "lr":
                lr = poly_lr(hyper.lr0, it, total_iters, hyper.poly_power)
                wd = hyper.weight_decay
            else:
                lr = hyper.lr0
                wd = poly_lr(hyper.weight_decay, it, total_iters, hyper.poly_power)
            loss_sum, n, dW, db = kernels.train_head(Z, y, W, b)
            if n == 0:
                raise ProbeError("probe batch has no labeled pixels")
            if not np.isfinite(loss_sum):
                raise NumericError("non-finite probe loss")
            inv = 1.0 / n
            vW *= hyper.momentum
            vW += dW * inv + wd * W
            vb *= hyper.momentum
            vb += db * inv
            W -= lr * vW
            b -= lr * vb
            it += 1
    return ProbeHead(step=model.current_step, class_ids=ids, W=W, b=b)


def probing_eval(model: SegModel, probe: ProbeHead, eval_grids, schedule: ClassSchedule, step: int | None = None) -> MetricsReport:
    """Probe mIoU over every scheduled class on the untouched eval labels."""
    ids = probe.class_ids
    K = len(ids)
    lut = np.full(max(ids) + 1, -1, dtype=np.int64)
    for i, c in enumerate(ids):
        lut[c] = i
    conf = np.zeros((K, K), dtype=np.int64)
    for g in eval_grids:
        Z = _embed_flat(model, g)
        pred = kernels.predict(Z, probe.W, probe.b)
        kernels.confusion_add(conf, _rows_from_labels(g.labels, lut), pred)
    return miou_groups(conf, schedule, schedule.num_steps, step=step if step is not None else probe.step)


def save_probe(probe: ProbeHead, path) -> None:
    np.savez(
        path,
        step=np.int64(probe.step),
        class_ids=np.asarray(probe.class_ids, dtype=np.int64),
        W=probe.W,
        b=probe.b,
    )


def load_probe(path) -> ProbeHead:
    with np.load(path) as z:
        return ProbeHead(
            step=int(z["step"]),
            class_ids=tuple(int(c) for c in z["class_ids"]),
            W=z["W"].astype(np.float64),
            b=z["b"].astype(np.float64),
        )
