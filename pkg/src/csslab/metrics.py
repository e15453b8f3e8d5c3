"""Evaluation: confusion matrices, grouped mIoU, and classifier drift.

Drift is quantified by comparing cosine structure over time: after step t,
take the cosine matrix between the class prototypes (mean embeddings, one row
per class ever scheduled, background included) and the weight rows of the
step-t class group. Re-measuring the same matrix k steps later and averaging
absolute entry differences gives the moving distance of that group. Observed
rows come from the live classifier; the probing variant uses rows of the
per-step linear probes, which isolates representation drift from classifier
drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .datagen import IGNORE, ClassSchedule, FeatureGrid
from .errors import MetricError
from .model import SegModel, embed, stacked_rows


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts with rows = ground truth, cols = prediction; IGNORE skipped."""
    p = np.asarray(pred).reshape(-1).astype(np.int64)
    g = np.asarray(gt).reshape(-1).astype(np.int64)
    if p.shape != g.shape:
        raise MetricError(f"pred size {p.shape} != gt size {g.shape}")
    g = np.where(g == IGNORE, -1, g)
    if p.min(initial=0) < 0 or p.max(initial=0) >= num_classes:
        raise MetricError(f"prediction outside 0..{num_classes - 1}")
    valid = g >= 0
    if g[valid].max(initial=0) >= num_classes:
        raise MetricError(f"ground-truth label outside 0..{num_classes - 1}")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    kernels.confusion_add(conf, g, p)
    return conf


def iou_per_class(conf: np.ndarray) -> np.ndarray:
    """IoU = TP / (TP + FP + FN); NaN where the class never occurs at all."""
    diag = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=1) + conf.sum(axis=0) - np.diag(conf)
    with np.errstate(invalid="ignore"):
        return np.where(denom > 0, diag / denom, np.nan)


@dataclass
class MetricsReport:
    """Grouped mIoU in percent; None when every class of a group is undefined."""

    step: int
    class_ids: tuple[int, ...]
    iou: np.ndarray  # per class, NaN = undefined
    miou_init: float | None
    miou_incr: float | None
    miou_all: float | None


def _group_mean(iou: np.ndarray, positions: list[int]) -> float | None:
    vals = iou[positions]
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        return None
    return float(vals.mean() * 100.0)


def miou_groups(conf: np.ndarray, schedule: ClassSchedule, seen_steps: int, step: int | None = None) -> MetricsReport:
    """Split per-class IoU into initial classes, later increments, and all.

    ``conf`` must cover exactly the classes of steps 1..seen_steps in class-id
    order. The increment group is undefined before step 2.
    """
    ids = schedule.classes_through(seen_steps)
    if conf.shape != (len(ids), len(ids)):
        raise MetricError(
            f"confusion shape {conf.shape} does not cover the {len(ids)} seen classes"
        )
    pos = {c: i for i, c in enumerate(ids)}
    iou = iou_per_class(conf)
    init_pos = [pos[c] for c in schedule.steps[0]]
    incr_pos = [pos[c] for s in schedule.steps[1:seen_steps] for c in s]
    return MetricsReport(
        step=step if step is not None else seen_steps,
        class_ids=ids,
        iou=iou,
        miou_init=_group_mean(iou, init_pos),
        miou_incr=_group_mean(iou, incr_pos) if incr_pos else None,
        miou_all=_group_mean(iou, list(range(len(ids)))),
    )


def evaluate_observed(model: SegModel, eval_grids, schedule: ClassSchedule, seen_steps: int) -> MetricsReport:
    """Eval-set mIoU with predictions restricted to the seen classes.

    Ground-truth pixels of not-yet-seen classes count as background, the same
    masking the training stream applies; after the final step nothing is
    masked. Future rows never participate in the argmax.
    """
    ids = schedule.classes_through(seen_steps)
    CW, cb, row_ids = stacked_rows(model, include_future=False)
    if tuple(row_ids[: len(ids)]) != ids:
        raise MetricError(f"learned rows {row_ids} do not cover seen classes {ids}")
    CW, cb = CW[: len(ids)], cb[: len(ids)]
    K = len(ids)
    lut = np.zeros(schedule.total_classes + 1, dtype=np.int64)
    for i, c in enumerate(ids):
        lut[c] = i
    conf = np.zeros((K, K), dtype=np.int64)
    for g in eval_grids:
        Z = embed(model, g).reshape(-1, model.dims.embed)
        pred = kernels.predict(Z, CW, cb)
        lab = g.labels.reshape(-1).astype(np.int64)
        lab = np.where(lab == IGNORE, -1, lut[np.where(lab == IGNORE, 0, lab)])
        kernels.confusion_add(conf, lab, pred)
    return miou_groups(conf, schedule, seen_steps, step=seen_steps)


# ---------------------------------------------------------------------------
# prototypes and drift


def class_prototypes(model: SegModel, grids, class_ids) -> np.ndarray:
    """Mean backbone embedding per class over all matching pixels, (m, embed).

    Every requested class must occur in ``grids``; IGNORE pixels and classes
    outside the request are skipped.
    """
    ids = tuple(int(c) for c in class_ids)
    top = max(ids)
    lut = np.full(top + 2, -1, dtype=np.int64)
    for i, c in enumerate(ids):
        lut[c] = i
    sums = np.zeros((len(ids), model.dims.embed))
    counts = np.zeros(len(ids), dtype=np.int64)
    for g in grids:
        Z = embed(model, g).reshape(-1, model.dims.embed)
        lab = g.labels.reshape(-1).astype(np.int64)
        lab = np.where((lab == IGNORE) | (lab > top), -1, lab)
        lab = np.where(lab >= 0, lut[np.maximum(lab, 0)], -1)
        kernels.prototype_accumulate(sums, counts, Z, lab)
    if (counts == 0).any():
        missing = ids[int(np.nonzero(counts == 0)[0][0])]
        raise MetricError(f"class {missing} has no pixels in the prototype set")
    return sums / counts[:, None]


@dataclass
class CosMatrix:
    """Cosines between prototypes (rows) and one step's weight rows (cols)."""

    values: np.ndarray  # (m, n)
    group_step: int  # the step whose class-group rows are the columns
    measured_step: int  # when prototypes and rows were read
    source: str  # "observed" or "probing"


def cos_matrix(prototypes: np.ndarray, rows: np.ndarray, group_step: int, measured_step: int, source: str = "observed") -> CosMatrix:
    """Cosine of every (prototype, weight row) pair; biases play no part."""
    p = np.asarray(prototypes, dtype=np.float64)
    w = np.asarray(rows, dtype=np.float64)
    if p.ndim != 2 or w.ndim != 2 or p.shape[1] != w.shape[1]:
        raise MetricError(f"incompatible shapes {p.shape} and {w.shape}")
    pn = np.linalg.norm(p, axis=1)
    wn = np.linalg.norm(w, axis=1)
    if (pn == 0).any():
        raise MetricError(f"zero-norm prototype row {int(np.nonzero(pn == 0)[0][0])}")
    if (wn == 0).any():
        raise MetricError(f"zero-norm weight row {int(np.nonzero(wn == 0)[0][0])}")
    vals = (p @ w.T) / np.outer(pn, wn)
    return CosMatrix(values=vals, group_step=group_step, measured_step=measured_step, source=source)


@dataclass(frozen=True)
class MdRecord:
    source: str
    t: int
    k: int
    value: float


def moving_distance(cos_ref: CosMatrix, cos_now: CosMatrix) -> MdRecord:
    """Mean absolute entry change between two tagged cosine matrices."""
    if cos_ref.values.shape != cos_now.values.shape:
        raise MetricError(
            f"cosine shapes differ: {cos_ref.values.shape} vs {cos_now.values.shape}"
        )
    if cos_ref.group_step != cos_now.group_step or cos_ref.source != cos_now.source:
        raise MetricError("cosine matrices tag different groups or sources")
    k = cos_now.measured_step - cos_ref.measured_step
    if k < 0:
        raise MetricError("reference matrix measured after the current one")
    value = float(np.abs(cos_now.values - cos_ref.values).mean())
    return MdRecord(source=cos_ref.source, t=cos_ref.group_step, k=k, value=value)


def _rows_for(model: SegModel, ids) -> np.ndarray:
    CW, _, row_ids = stacked_rows(model, include_future=False)
    pos = {c: i for i, c in enumerate(row_ids)}
    missing = [c for c in ids if c not in pos]
    if missing:
        raise MetricError(f"classes {missing} have no learned rows")
    return CW[[pos[c] for c in ids]]


def _probe_rows(probe, ids) -> np.ndarray:
    pos = {c: i for i, c in enumerate(probe.class_ids)}
    missing = [c for c in ids if c not in pos]
    if missing:
        raise MetricError(f"classes {missing} missing from the probe head")
    return probe.W[[pos[c] for c in ids]]


def md_trajectory(models, eval_grids, schedule: ClassSchedule, probes=None, weights_mode: str = "current") -> list[MdRecord]:
    """All (t, k) moving distances for t in 2..T, k in 1..T-t.

    ``models`` maps step -> model snapshot taken right after that step;
    ``probes`` (optional) maps step -> probe head trained on that snapshot.
    ``weights_mode`` picks where the observed rows at time t+k are read:
    "current" (their live values, the default) or "frozen" (their state at
    time t, isolating prototype motion).
    """
    if weights_mode not in ("current", "frozen"):
        raise MetricError(f"weights_mode must be current or frozen, got {weights_mode!r}")
    T = schedule.num_steps
    all_ids = schedule.classes_through(T)
    needed = range(2, T + 1)
    missing = [t for t in needed if t not in models]
    if missing:
        raise MetricError(f"model snapshots missing for steps {missing}")
    protos = {t: class_prototypes(models[t], eval_grids, all_ids) for t in needed}

    out: list[MdRecord] = []
    for t in range(2, T + 1):
        group = schedule.classes_of(t)
        ref = cos_matrix(protos[t], _rows_for(models[t], group), t, t, "observed")
        for k in range(1, T - t + 1):
            rows_model = models[t] if weights_mode == "frozen" else models[t + k]
            now = cos_matrix(protos[t + k], _rows_for(rows_model, group), t, t + k, "observed")
            out.append(moving_distance(ref, now))
    if probes is not None:
        missing = [t for t in needed if t not in probes]
        if missing:
            raise MetricError(f"probe snapshots missing for steps {missing}")
        for t in range(2, T + 1):
            group = schedule.classes_of(t)
            ref = cos_matrix(protos[t], _probe_rows(probes[t], group), t, t, "probing")
            for k in range(1, T - t + 1):
                now = cos_matrix(protos[t + k], _probe_rows(probes[t + k], group), t, t + k, "probing")
                out.append(moving_distance(ref, now))
    return out
