"""Incremental training orchestration.

One experiment = one strategy run over a class schedule:

  dft      fine-tune everything at every step
  fixb     freeze the backbone after step 1
  fixbc    also freeze previously learned classifier blocks (background
           block included)
  fixbc_p  fixbc plus pre-allocated future-class rows that train every step
           and are promoted, values intact, when their class arrives
  joint    single step over every class at once (upper bound)

Step 1 is strategy-independent for the incremental strategies, so its
trained model is cached under a content key (schedule, scenario, data, dims,
hyper, seed) and reused by sibling runs; see ``base_cache`` below.

Per step: classifier rows for the new classes are created (or promoted from
the future block), freeze flags are applied, and SGD with momentum, weight
decay and a per-step poly learning-rate schedule runs for
``epochs_per_step`` epochs over the step's relabeled images. Momentum
buffers reset at step boundaries. When the backbone is frozen the step's
embeddings are computed once and the classifier trains on them directly;
the arithmetic is identical, only redundant work is skipped.

Config files are plain ``key = value`` lines; ``#`` comments and
``[section]`` headers are allowed and ignored. Keys:

  name, seed, setting, scenario, strategy, output_dir, probing, md,
  md_weights (current|frozen), base_cache, oversize_rows, context_mean,
  lr0, momentum, weight_decay, poly_power, epochs_per_step, batch_size,
  poly_on (lr|weight_decay), probe_epochs, dims (d,hidden,embed),
  data (CSSF stem) or synthetic: classes, grid (HxW), images_per_class,
  objects (lo:hi), noise_sigma, mixing_depth, data_seed (defaults to seed).

Randomness: all draws come from named child streams of the run seed -
"init" (backbone), "expand"/step and "future" (new rows), "shuffle"/step
(one permutation per epoch, drawn sequentially), "probe"/step (probe init
then its per-epoch permutations). Identical config and seed give identical
logs, timings aside.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .datagen import (
    Dataset,
    GridCollection,
    SynthParams,
    build_schedule,
    generate_dataset,
    load_cssf,
    make_task_stream,
    ClassSchedule,
    StepTask,
    TaskStream,
)
from .errors import ArtifactError, ConfigError, NumericError, StateError
from .metrics import MdRecord, MetricsReport, evaluate_observed, md_trajectory
from .model import (
    Dims,
    Hyper,
    SegModel,
    STRATEGIES,
    _loss_and_grads_arrays,
    _row_spans,
    batch_arrays,
    count_trainable,
    expand_classifier,
    init_model,
    load_checkpoint,
    make_future_pool,
    params,
    pixel_matrix,
    poly_lr,
    preallocate_future,
    promote_future,
    save_checkpoint,
    sgd_step,
    stacked_rows,
    trainable_components,
)
from .probing import ProbeHead, load_probe, probing_eval, save_probe, train_probe
from .rng import RngStream


# ---------------------------------------------------------------------------
# freeze plans


@dataclass(frozen=True)
class TrainablePlan:
    backbone: bool
    old_blocks: bool
    current_block: bool
    future: bool


def freeze_plan(strategy: str, step: int) -> TrainablePlan:
    """What trains at the given step; step 1 trains everything everywhere."""
    if strategy not in STRATEGIES:
        raise StateError(f"unknown strategy {strategy!r}")
    if step < 1:
        raise StateError(f"step must be >= 1, got {step}")
    if step == 1 or strategy in ("dft", "joint"):
        return TrainablePlan(True, True, True, strategy == "fixbc_p")
    if strategy == "fixb":
        return TrainablePlan(False, True, True, False)
    if strategy == "fixbc":
        return TrainablePlan(False, False, True, False)
    return TrainablePlan(False, False, True, True)  # fixbc_p


def apply_freeze(model: SegModel, plan: TrainablePlan, step: int) -> set[str]:
    """Set freeze flags from the plan; returns the trainable component set."""
    model.backbone.frozen = not plan.backbone
    for blk in model.blocks:
        blk.frozen = not (plan.current_block if blk.step == step else plan.old_blocks)
    return trainable_components(model)


# ---------------------------------------------------------------------------
# one step


@dataclass
class StepOutcome:
    step: int
    mask: set[str]
    seconds: float
    final_loss: float
    iterations: int


def _grow_bank(model: SegModel, task: StepTask, schedule: ClassSchedule, stream: RngStream, oversize_rows: int) -> None:
    t = task.step
    new_ids = [c for c in task.classes if c not in set(model.learned_ids())]
    if model.strategy == "fixbc_p" and t >= 2:
        if model.future is None:
            expand_classifier(model, new_ids, stream.child("expand", t))
            if oversize_rows > 0:
                make_future_pool(model, oversize_rows, stream.child("future"))
            elif schedule.classes_after(t):
                preallocate_future(model, schedule, stream.child("future"))
        else:
            refill = len(new_ids) if -1 in model.future.class_ids else 0
            promote_future(model, new_ids, rng=stream.child("expand", t), refill=refill)
    else:
        expand_classifier(model, new_ids, stream.child("expand", t))


def _head_loss_grads(model: SegModel, Z, y, mask):
    CW, cb, _ = stacked_rows(model)
    if y.max(initial=-1) >= CW.shape[0]:
        raise StateError(f"label {int(y.max())} outside the {CW.shape[0]} active rows")
    loss_sum, n, dCW, dcb = kernels.train_head(Z, y, CW, cb)
    if n == 0:
        raise StateError("batch has no non-IGNORE pixels")
    if not np.isfinite(loss_sum):
        raise NumericError("non-finite loss in classifier-only training")
    inv = 1.0 / n
    grads = {}
    for name, lo, hi in _row_spans(model, include_future=True):
        grads[f"{name}.W"] = dCW[lo:hi] * inv
        grads[f"{name}.b"] = dcb[lo:hi] * inv
    for name in grads:
        if name.split(".", 1)[0] not in mask:
            grads[name] = np.zeros_like(grads[name])
    return float(loss_sum * inv), grads


def run_step(model: SegModel, task: StepTask, schedule: ClassSchedule, hyper: Hyper, stream: RngStream, oversize_rows: int = 0) -> StepOutcome:
    """Grow the bank, apply the freeze plan, and SGD over the step's images."""
    t = task.step
    if model.current_step != t - 1:
        raise StateError(f"model is after step {model.current_step}, cannot run step {t}")
    started = time.perf_counter()

    _grow_bank(model, task, schedule, stream, oversize_rows)
    plan = freeze_plan(model.strategy, t)
    mask = apply_freeze(model, plan, t)

    # local row space: labels are class ids; rows are positions in id order
    learned = model.learned_ids()
    lut = np.full(max(learned) + 1, -1, dtype=np.int64)
    for i, c in enumerate(learned):
        lut[c] = i

    def rows_of(labels):
        y = labels.reshape(-1).astype(np.int64)
        return np.where(y == 65535, -1, lut[np.where(y == 65535, 0, y)])

    Xs = [pixel_matrix(model, g.features) for g in task.grids]
    ys = [rows_of(g.labels) for g in task.grids]
    backbone_trains = "backbone" in mask
    if not backbone_trains:
        bb = model.backbone
        Xs = [kernels.embed(X, bb.W1, bb.b1, bb.W2, bb.b2) for X in Xs]

    n_images = len(task.grids)
    per_epoch = math.ceil(n_images / hyper.batch_size)
    total_iters = hyper.epochs_per_step * per_epoch
    velocity = {name: np.zeros_like(a) for name, a in params(model).items()}
    shuffle = stream.child("shuffle", t)

    it = 0
    loss = math.nan
    for _ in range(hyper.epochs_per_step):
        order = shuffle.permutation(n_images)
        for b in range(per_epoch):
            idx = order[b * hyper.batch_size : (b + 1) * hyper.batch_size]
            X = np.concatenate([Xs[i] for i in idx], axis=0)
            y = np.concatenate([ys[i] for i in idx], axis=0)
            if hyper.poly_on == "lr":
                lr = poly_lr(hyper.lr0, it, total_iters, hyper.poly_power)
                wd = hyper.weight_decay
            else:
                lr = hyper.lr0
                wd = poly_lr(hyper.weight_decay, it, total_iters, hyper.poly_power)
            if backbone_trains:
                loss, grads = _loss_and_grads_arrays(model, X, y, mask)
            else:
                loss, grads = _head_loss_grads(model, X, y, mask)
            sgd_step(params(model), grads, velocity, lr, hyper.momentum, wd, mask)
            it += 1

    model.current_step = t
    return StepOutcome(
        step=t,
        mask=mask,
        seconds=time.perf_counter() - started,
        final_loss=loss,
        iterations=it,
    )


# ---------------------------------------------------------------------------
# experiment config


@dataclass
class ExperimentConfig:
    seed: int
    setting: object  # "X-Y" string or list of per-step foreground counts
    strategy: str
    data: object  # SynthParams or CSSF path stem
    scenario: str = "overlapped"
    name: str = ""
    dims: Dims = field(default_factory=Dims)
    hyper: Hyper = field(default_factory=Hyper)
    output_dir: str | None = None
    probing: bool = True
    md: bool = True
    md_weights: str = "current"
    context_mean: bool = False
    oversize_rows: int = 0
    base_cache: str | None = None
    config_text: str = ""


_BOOL = {"on": True, "true": True, "1": True, "yes": True,
         "off": False, "false": False, "0": False, "no": False}

_KNOWN_KEYS = {
    "name", "seed", "setting", "scenario", "strategy", "output_dir", "probing",
    "md", "md_weights", "base_cache", "oversize_rows", "context_mean",
    "lr0", "momentum", "weight_decay", "poly_power", "epochs_per_step",
    "batch_size", "poly_on", "probe_epochs", "dims", "data", "classes", "grid",
    "images_per_class", "objects", "noise_sigma", "mixing_depth", "data_seed",
}


def parse_config_text(text: str) -> dict[str, tuple[int, str]]:
    """key -> (line number, raw value); rejects junk with the line number."""
    pairs: dict[str, tuple[int, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            continue  # purely cosmetic section headers
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = (lineno, value)
    return pairs


def _take(pairs, key, convert, default=None, required=False):
    if key not in pairs:
        if required:
            raise ConfigError(f"missing required key {key!r}")
        return default
    lineno, raw = pairs.pop(key)
    try:
        return convert(raw)
    except (ValueError, KeyError):
        raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from None


def _as_bool(raw: str) -> bool:
    return _BOOL[raw.lower()]


def config_from_text(text: str) -> ExperimentConfig:
    pairs = parse_config_text(text)
    for key, (lineno, _) in pairs.items():
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")

    seed = _take(pairs, "seed", int, required=True)
    strategy = _take(pairs, "strategy", str, required=True)
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    setting_raw = _take(pairs, "setting", str, required=True)
    setting: object = setting_raw
    if "-" not in setting_raw:
        setting = [int(x) for x in setting_raw.split(",")]
    scenario = _take(pairs, "scenario", str, default="overlapped")

    dims_raw = _take(pairs, "dims", str, default=None)
    if dims_raw is None:
        dims = Dims()
    else:
        parts = [int(x) for x in dims_raw.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"dims needs 3 integers 'd,hidden,embed', got {dims_raw!r}")
        dims = Dims(*parts)

    hyper = Hyper(
        lr0=_take(pairs, "lr0", float, default=Hyper.lr0),
        momentum=_take(pairs, "momentum", float, default=Hyper.momentum),
        weight_decay=_take(pairs, "weight_decay", float, default=Hyper.weight_decay),
        poly_power=_take(pairs, "poly_power", float, default=Hyper.poly_power),
        epochs_per_step=_take(pairs, "epochs_per_step", int, default=Hyper.epochs_per_step),
        batch_size=_take(pairs, "batch_size", int, default=Hyper.batch_size),
        poly_on=_take(pairs, "poly_on", str, default="lr"),
        probe_epochs=_take(pairs, "probe_epochs", int, default=None),
    )

    data_path = _take(pairs, "data", str, default=None)
    if data_path is None:
        classes = _take(pairs, "classes", int, required=True)
        grid = _take(pairs, "grid", str, default="16x16")
        try:
            h, w = (int(x) for x in grid.lower().split("x"))
        except ValueError:
            raise ConfigError(f"grid must look like 'HxW', got {grid!r}") from None
        objects = _take(pairs, "objects", str, default="2:4")
        try:
            lo, hi = (int(x) for x in objects.split(":"))
        except ValueError:
            raise ConfigError(f"objects must look like 'lo:hi', got {objects!r}") from None
        data: object = SynthParams(
            num_classes=classes,
            seed=_take(pairs, "data_seed", int, default=seed),
            feat_dim=dims.feat_dim,
            height=h,
            width=w,
            images_per_class=_take(pairs, "images_per_class", int, default=12),
            objects_per_image=(lo, hi),
            noise_sigma=_take(pairs, "noise_sigma", float, default=0.1),
            mixing_depth=_take(pairs, "mixing_depth", int, default=1),
        )
    else:
        data = data_path
        for key in ("classes", "grid", "images_per_class", "objects",
                    "noise_sigma", "mixing_depth", "data_seed"):
            if key in pairs:
                lineno, _ = pairs[key]
                raise ConfigError(f"line {lineno}: {key} conflicts with 'data ='")

    cfg = ExperimentConfig(
        seed=seed,
        setting=setting,
        strategy=strategy,
        scenario=scenario,
        data=data,
        name=_take(pairs, "name", str, default=""),
        dims=dims,
        hyper=hyper,
        output_dir=_take(pairs, "output_dir", str, default=None),
        probing=_take(pairs, "probing", _as_bool, default=True),
        md=_take(pairs, "md", _as_bool, default=True),
        md_weights=_take(pairs, "md_weights", str, default="current"),
        context_mean=_take(pairs, "context_mean", _as_bool, default=False),
        oversize_rows=_take(pairs, "oversize_rows", int, default=0),
        base_cache=_take(pairs, "base_cache", str, default=None),
        config_text=text,
    )
    if cfg.md_weights not in ("current", "frozen"):
        raise ConfigError(f"md_weights must be current or frozen, got {cfg.md_weights!r}")
    return cfg


def load_config(path) -> ExperimentConfig:
    cfg = config_from_text(Path(path).read_text())
    if not cfg.name:
        cfg.name = Path(path).stem
    return cfg


# ---------------------------------------------------------------------------
# experiment log


@dataclass
class StepRecord:
    step: int
    classes: tuple[int, ...]
    trainable_params: int
    seconds: float
    observed: MetricsReport
    probe: MetricsReport | None = None


@dataclass
class ExperimentLog:
    name: str
    seed: int
    strategy: str
    scenario: str
    setting: str
    schedule: ClassSchedule
    records: list[StepRecord]
    md_records: list[MdRecord]
    total_incremental_seconds: float
    avg_trainable_incremental: float | None
    kernel_backend: str
    config_text: str


def snapshot_model(model: SegModel) -> SegModel:
    """Independent deep copy (own arrays, same flags)."""
    bb = model.backbone
    clone = SegModel(
        dims=model.dims,
        strategy=model.strategy,
        backbone=replace(bb, W1=bb.W1.copy(), b1=bb.b1.copy(), W2=bb.W2.copy(), b2=bb.b2.copy()),
        blocks=[replace(blk, W=blk.W.copy(), b=blk.b.copy()) for blk in model.blocks],
        future=None if model.future is None else replace(
            model.future, W=model.future.W.copy(), b=model.future.b.copy()
        ),
        current_step=model.current_step,
        context_mean=model.context_mean,
    )
    return clone


def _data_descriptor(data) -> str:
    if isinstance(data, SynthParams):
        return "synth:" + repr(data)
    stem = str(data)
    h = hashlib.sha256()
    for suffix in (".train.cssf", ".eval.cssf"):
        h.update(Path(stem + suffix).read_bytes())
    return "file:" + h.hexdigest()


def _base_key(config: ExperimentConfig, schedule: ClassSchedule) -> str:
    """Step-1 cache key; everything that shapes step 1 except the strategy."""
    h = config.hyper
    payload = json.dumps(
        {
            "schedule": schedule.steps,
            "scenario": config.scenario,
            "dims": (config.dims.feat_dim, config.dims.hidden, config.dims.embed),
            "context": config.context_mean,
            "hyper": (h.lr0, h.momentum, h.weight_decay, h.poly_power,
                      h.epochs_per_step, h.batch_size, h.poly_on),
            "seed": config.seed,
            "data": _data_descriptor(config.data),
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def _resolve_dataset(config: ExperimentConfig) -> Dataset:
    if isinstance(config.data, SynthParams):
        if config.data.feat_dim != config.dims.feat_dim:
            raise ConfigError(
                f"data feat_dim {config.data.feat_dim} != model feat_dim {config.dims.feat_dim}"
            )
        return generate_dataset(config.data)
    stem = str(config.data)
    train = load_cssf(stem + ".train.cssf")
    eval_set = load_cssf(stem + ".eval.cssf")
    if train.n_classes != eval_set.n_classes:
        raise ArtifactError(
            f"train has {train.n_classes} classes but eval has {eval_set.n_classes}"
        )
    return Dataset(train=train, eval=eval_set)


def _count_classes(config: ExperimentConfig, dataset: Dataset) -> int:
    return dataset.train.n_classes


def run_experiment(config: ExperimentConfig) -> ExperimentLog:
    """Run all steps, probe and measure drift, and write the output bundle.

    Joint runs collapse the schedule to a single step over every class.
    When ``output_dir`` is set the bundle (experiment.json, curves.csv,
    md.csv, SVG charts, per-step checkpoints and probes) is written there;
    snapshots land in ``<output_dir>/snapshots``.
    """
    from . import report  # local import; report pulls no trainer symbols

    dataset = _resolve_dataset(config)
    n_classes = _count_classes(config, dataset)
    schedule = build_schedule(config.setting, n_classes)
    if config.strategy == "joint":
        schedule = build_schedule([n_classes], n_classes)
    scenario = config.scenario if config.strategy != "joint" else "overlapped"
    stream_tasks = make_task_stream(dataset, schedule, scenario)
    T = schedule.num_steps

    rng = RngStream(config.seed)
    model = init_model(config.dims, config.strategy, rng.child("init"), config.context_mean)

    outdir = Path(config.output_dir) if config.output_dir else None
    snapdir = None
    if outdir:
        snapdir = outdir / "snapshots"
        snapdir.mkdir(parents=True, exist_ok=True)

    cache_dir = None
    if config.base_cache:
        cache_dir = Path(config.base_cache)
    elif outdir:
        cache_dir = outdir.parent / "base_cache"

    records: list[StepRecord] = []
    snapshots: dict[int, SegModel] = {}
    probes: dict[int, ProbeHead] = {}
    total_incremental = 0.0

    for task in stream_tasks.steps:
        t = task.step
        cache_path = None
        if t == 1 and cache_dir is not None:
            cache_dir.mkdir(parents=True, exist_ok=True)
            cache_path = cache_dir / f"step1_{_base_key(config, schedule)}.ckpt"
        if cache_path is not None and cache_path.exists():
            started = time.perf_counter()
            model = load_checkpoint(cache_path)
            model.strategy = config.strategy  # step 1 is strategy-independent
            outcome = StepOutcome(
                step=1,
                mask=trainable_components(model),
                seconds=time.perf_counter() - started,
                final_loss=math.nan,
                iterations=0,
            )
        else:
            outcome = run_step(model, task, schedule, config.hyper, rng, config.oversize_rows)
            if cache_path is not None:
                save_checkpoint(model, cache_path)
        if t >= 2:
            total_incremental += outcome.seconds

        observed = evaluate_observed(model, stream_tasks.eval, schedule, t)
        probe_report = None
        if config.probing:
            probe = train_probe(model, dataset.train, schedule, config.hyper, rng.child("probe", t))
            probes[t] = probe
            probe_report = probing_eval(model, probe, stream_tasks.eval, schedule, step=t)
            if snapdir:
                save_probe(probe, snapdir / f"probe_{t:02d}.npz")
        records.append(
            StepRecord(
                step=t,
                classes=task.classes,
                trainable_params=count_trainable(model, outcome.mask),
                seconds=outcome.seconds,
                observed=observed,
                probe=probe_report,
            )
        )
        snapshots[t] = snapshot_model(model)
        if snapdir:
            save_checkpoint(model, snapdir / f"step_{t:02d}.ckpt")

    md_records: list[MdRecord] = []
    if config.md and T >= 2:
        md_records = md_trajectory(
            snapshots,
            stream_tasks.eval,
            schedule,
            probes=probes if config.probing else None,
            weights_mode=config.md_weights,
        )

    incr = [r.trainable_params for r in records if r.step >= 2]
    log = ExperimentLog(
        name=config.name or (outdir.name if outdir else config.strategy),
        seed=config.seed,
        strategy=config.strategy,
        scenario=scenario,
        setting=schedule.setting,
        schedule=schedule,
        records=records,
        md_records=md_records,
        total_incremental_seconds=total_incremental,
        avg_trainable_incremental=(sum(incr) / len(incr)) if incr else None,
        kernel_backend=kernels.backend_name,
        config_text=config.config_text,
    )
    if outdir:
        report.write_experiment_bundle(log, outdir)
    return log
