"""Command line surface.

    csslab gen      write a synthetic dataset pair (<stem>.train.cssf /
                    <stem>.eval.cssf) and print its class pixel histogram
    csslab run      run one experiment config, write its output bundle
    csslab probe    re-run linear probing on a run's saved snapshots
    csslab md       recompute moving distances from saved snapshots
    csslab compare  combined CSV + overlay SVG across experiment dirs

Exit codes: 0 on success, 2 for usage errors, 1 for runtime failures
(reported as "<module>: message" on stderr).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import report
from .datagen import IGNORE, SynthParams, build_schedule, generate_dataset, save_cssf
from .errors import ArtifactError, CssLabError
from .metrics import md_trajectory
from .model import load_checkpoint
from .probing import load_probe, probing_eval, save_probe, train_probe
from .rng import RngStream
from .trainer import ExperimentConfig, config_from_text, load_config, run_experiment, _resolve_dataset


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _nonneg_float(s: str) -> float:
    v = float(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _size(s: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in s.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {s!r}") from None
    if h < 4 or w < 4:
        raise argparse.ArgumentTypeError(f"grid must be at least 4x4, got {s!r}")
    return h, w


def _obj_range(s: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in s.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"objects must look like lo:hi, got {s!r}") from None
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError(f"need 1 <= lo <= hi, got {s!r}")
    return lo, hi


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csslab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic CSSF dataset pair")
    g.add_argument("--classes", type=_positive_int, required=True, help="foreground class count")
    g.add_argument("--feat-dim", type=_positive_int, default=16)
    g.add_argument("--size", type=_size, default=(16, 16), metavar="HxW")
    g.add_argument("--images", type=_positive_int, default=12, help="train images per class")
    g.add_argument("--objects", type=_obj_range, default=(2, 4), metavar="LO:HI")
    g.add_argument("--noise", type=_nonneg_float, default=0.1)
    g.add_argument("--mixing", type=_nonneg_int, default=1)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="output stem (writes stem.train.cssf / stem.eval.cssf)")

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config", help="path to a key = value config file")
    r.add_argument("--output-dir", default=None, help="override output_dir from the config")

    pr = sub.add_parser("probe", help="re-run probing on a finished run's snapshots")
    pr.add_argument("rundir", help="experiment output directory")

    m = sub.add_parser("md", help="recompute moving distances from snapshots")
    m.add_argument("rundir", help="experiment output directory")
    m.add_argument("--weights", choices=("current", "frozen"), default="current")

    c = sub.add_parser("compare", help="combined CSV and overlay SVG across runs")
    c.add_argument("rundirs", nargs="+", help="experiment output directories")
    c.add_argument("--out", required=True, help="output stem (writes stem.csv / stem.svg)")
    return p


def _cmd_gen(args) -> int:
    stem = args.out[: -len(".cssf")] if args.out.endswith(".cssf") else args.out
    params = SynthParams(
        num_classes=args.classes,
        seed=args.seed,
        feat_dim=args.feat_dim,
        height=args.size[0],
        width=args.size[1],
        images_per_class=args.images,
        objects_per_image=args.objects,
        noise_sigma=args.noise,
        mixing_depth=args.mixing,
    )
    dataset = generate_dataset(params)
    Path(stem).parent.mkdir(parents=True, exist_ok=True)
    save_cssf(dataset.train, stem + ".train.cssf")
    save_cssf(dataset.eval, stem + ".eval.cssf")
    print(f"wrote {stem}.train.cssf ({len(dataset.train)} images) "
          f"and {stem}.eval.cssf ({len(dataset.eval)} images)")
    counts = np.zeros((2, args.classes + 1), dtype=np.int64)
    for col, grids in enumerate((dataset.train, dataset.eval)):
        for g in grids:
            lab = g.labels[g.labels != IGNORE].astype(np.int64)
            counts[col] += np.bincount(lab, minlength=args.classes + 1)
    print("class pixels (train / eval):")
    for c in range(args.classes + 1):
        print(f"  {c:3d}: {counts[0, c]} / {counts[1, c]}")
    return 0


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    log = run_experiment(config)
    last = log.records[-1]

    def fmt(v):
        return "n/a" if v is None else f"{v:.2f}"

    print(
        f"{log.name} [{log.strategy} {log.setting} {log.scenario} seed {log.seed}] "
        f"final: miou_init={fmt(last.observed.miou_init)} "
        f"miou_incr={fmt(last.observed.miou_incr)} "
        f"miou_all={fmt(last.observed.miou_all)}"
    )
    if last.probe is not None:
        print(f"  probe: miou_all={fmt(last.probe.miou_all)}")
    print(f"  incremental training time: {log.total_incremental_seconds:.2f}s "
          f"(kernels: {log.kernel_backend})")
    if config.output_dir:
        print(f"  bundle written to {config.output_dir}")
    return 0


def _restore_run(rundir: str):
    """Config, dataset, schedule, and step snapshots of a finished run."""
    doc = report.load_experiment_json(rundir)
    if not doc.get("config_text"):
        raise ArtifactError(f"{rundir} has no embedded config; cannot rebuild its data")
    config = config_from_text(doc["config_text"])
    dataset = _resolve_dataset(config)
    n = dataset.train.n_classes
    schedule = build_schedule(config.setting, n)
    if config.strategy == "joint":
        schedule = build_schedule([n], n)
    snapdir = Path(rundir) / "snapshots"
    paths = sorted(snapdir.glob("step_*.ckpt"))
    if not paths:
        raise ArtifactError(f"no step checkpoints under {snapdir}")
    snapshots = {int(p.stem.split("_")[1]): load_checkpoint(p) for p in paths}
    missing = [t for t in range(1, schedule.num_steps + 1) if t not in snapshots]
    if missing:
        raise ArtifactError(f"snapshots missing for steps {missing} under {snapdir}")
    return config, dataset, schedule, snapshots


def _cmd_probe(args) -> int:
    config, dataset, schedule, snapshots = _restore_run(args.rundir)
    rng = RngStream(config.seed)
    snapdir = Path(args.rundir) / "snapshots"
    print(f"probing {len(snapshots)} snapshots of {args.rundir}")
    for t in sorted(snapshots):
        model = snapshots[t]
        probe = train_probe(model, dataset.train, schedule, config.hyper, rng.child("probe", t))
        save_probe(probe, snapdir / f"probe_{t:02d}.npz")
        rep = probing_eval(model, probe, dataset.eval, schedule, step=t)

        def fmt(v):
            return "n/a" if v is None else f"{v:.2f}"

        print(f"  step {t}: probe miou_all={fmt(rep.miou_all)} "
              f"init={fmt(rep.miou_init)} incr={fmt(rep.miou_incr)}")
    return 0


def _cmd_md(args) -> int:
    config, dataset, schedule, snapshots = _restore_run(args.rundir)
    if schedule.num_steps < 2:
        print("single-step run: no moving distances to compute")
        return 0
    snapdir = Path(args.rundir) / "snapshots"
    probe_paths = {t: snapdir / f"probe_{t:02d}.npz" for t in range(2, schedule.num_steps + 1)}
    probes = None
    if all(p.exists() for p in probe_paths.values()):
        probes = {t: load_probe(p) for t, p in probe_paths.items()}
    records = md_trajectory(
        snapshots, dataset.eval, schedule, probes=probes, weights_mode=args.weights
    )
    doc = {"md": [{"source": m.source, "t": m.t, "k": m.k, "value": m.value} for m in records]}
    report.write_md_csv(doc, Path(args.rundir) / "md.csv")
    for source in ("observed", "probing"):
        vals = [m.value for m in records if m.source == source]
        if vals:
            print(f"{source}: {len(vals)} records, mean MD {sum(vals) / len(vals):.4f}")
    if probes is None:
        print("probe snapshots absent: wrote observed records only "
              "(run 'csslab probe' first for probing MD)")
    print(f"wrote {Path(args.rundir) / 'md.csv'} (weights mode: {args.weights})")
    return 0


def _cmd_compare(args) -> int:
    docs = [report.load_experiment_json(d) for d in args.rundirs]
    csv_path, svg_path = report.write_comparison(docs, args.out)
    print(f"wrote {csv_path} and {svg_path}")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "run": _cmd_run,
    "probe": _cmd_probe,
    "md": _cmd_md,
    "compare": _cmd_compare,
}


def _module_of(exc: BaseException) -> str:
    mod = "csslab"
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("csslab"):
            mod = name
        tb = tb.tb_next
    return mod


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CssLabError as exc:
        print(f"{_module_of(exc)}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"csslab: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
