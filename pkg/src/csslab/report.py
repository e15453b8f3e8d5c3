"""Experiment output bundle: JSON log, CSV curves, and dependency-free SVG.

Chart geometry (the tests replicate this transform): the canvas is 800x500
with margins left 70, right 20, top 40, bottom 60. x maps [x_min, x_max] and
y maps [y_min, y_max] linearly onto the plot area, y axis pointing up.
One ``<polyline>`` per series, class "series".
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ArtifactError

WIDTH, HEIGHT = 800, 500
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 60

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")

CURVE_COLUMNS = (
    "step", "miou_init", "miou_incr", "miou_all",
    "probe_miou_init", "probe_miou_incr", "probe_miou_all",
    "trainable_params", "seconds",
)


def _num(x):
    if x is None:
        return None
    return None if isinstance(x, float) and math.isnan(x) else float(x)


def log_to_dict(log) -> dict:
    steps = []
    for r in log.records:
        row = {
            "step": r.step,
            "classes": list(r.classes),
            "trainable_params": r.trainable_params,
            "seconds": r.seconds,
            "miou_init": _num(r.observed.miou_init),
            "miou_incr": _num(r.observed.miou_incr),
            "miou_all": _num(r.observed.miou_all),
            "iou": [_num(v) for v in r.observed.iou],
        }
        if r.probe is not None:
            row["probe_miou_init"] = _num(r.probe.miou_init)
            row["probe_miou_incr"] = _num(r.probe.miou_incr)
            row["probe_miou_all"] = _num(r.probe.miou_all)
        else:
            row["probe_miou_init"] = row["probe_miou_incr"] = row["probe_miou_all"] = None
        steps.append(row)
    return {
        "format": "csslab-experiment-v1",
        "name": log.name,
        "seed": log.seed,
        "strategy": log.strategy,
        "scenario": log.scenario,
        "setting": log.setting,
        "schedule": [list(s) for s in log.schedule.steps],
        "kernel_backend": log.kernel_backend,
        "steps": steps,
        "md": [
            {"source": m.source, "t": m.t, "k": m.k, "value": m.value}
            for m in log.md_records
        ],
        "total_incremental_seconds": log.total_incremental_seconds,
        "avg_trainable_incremental": _num(log.avg_trainable_incremental),
        "config_text": log.config_text,
    }


def write_curves_csv(doc: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_COLUMNS)
        for row in doc["steps"]:
            w.writerow(["" if row.get(c) is None else row.get(c) for c in CURVE_COLUMNS])


def write_md_csv(doc: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("source", "t", "k", "value"))
        for m in doc["md"]:
            w.writerow((m["source"], m["t"], m["k"], m["value"]))


# ---------------------------------------------------------------------------
# SVG


def _transform(xs, ys, x_range, y_range):
    x0, x1 = x_range
    y0, y1 = y_range
    spanx = (x1 - x0) or 1.0
    spany = (y1 - y0) or 1.0
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B
    px = [MARGIN_L + (x - x0) / spanx * plot_w for x in xs]
    py = [HEIGHT - MARGIN_B - (y - y0) / spany * plot_h for y in ys]
    return px, py


def svg_line_chart(series, title, xlabel, ylabel, y_range=None) -> str:
    """series: list of (label, xs, ys). Returns a complete SVG document."""
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys) if y is not None]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    x_min = min(p[0] for p in pts)
    x_max = max(p[0] for p in pts)
    if y_range is None:
        top = max(p[1] for p in pts)
        y_range = (0.0, top * 1.05 if top > 0 else 1.0)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{escape(title)}</text>',
    ]
    # axes
    x_axis_y = HEIGHT - MARGIN_B
    out.append(
        f'<line x1="{MARGIN_L}" y1="{x_axis_y}" x2="{WIDTH - MARGIN_R}" y2="{x_axis_y}" '
        'stroke="black"/>'
    )
    out.append(
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{x_axis_y}" stroke="black"/>'
    )
    out.append(
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 16}" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{escape(xlabel)}</text>'
    )
    out.append(
        f'<text x="20" y="{HEIGHT / 2}" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif" transform="rotate(-90 20 {HEIGHT / 2})">{escape(ylabel)}</text>'
    )
    # ticks: x at integer steps when narrow, else 6 evenly spaced; y 6 spaced
    n_x = int(x_max - x_min)
    xt = [x_min + i for i in range(n_x + 1)] if 0 < n_x <= 12 else [
        x_min + i * (x_max - x_min) / 5 for i in range(6)
    ]
    for xv in xt:
        (px,), _ = _transform([xv], [0], (x_min, x_max), y_range)
        out.append(f'<line x1="{px:.1f}" y1="{x_axis_y}" x2="{px:.1f}" y2="{x_axis_y + 5}" stroke="black"/>')
        out.append(
            f'<text x="{px:.1f}" y="{x_axis_y + 20}" text-anchor="middle" font-size="11" '
            f'font-family="sans-serif">{xv:g}</text>'
        )
    for i in range(6):
        yv = y_range[0] + i * (y_range[1] - y_range[0]) / 5
        _, (py,) = _transform([0], [yv], (x_min, x_max), y_range)
        out.append(f'<line x1="{MARGIN_L - 5}" y1="{py:.1f}" x2="{MARGIN_L}" y2="{py:.1f}" stroke="black"/>')
        out.append(
            f'<text x="{MARGIN_L - 9}" y="{py + 4:.1f}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif">{yv:.3g}</text>'
        )
    # series
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        keep = [(x, y) for x, y in zip(xs, ys) if y is not None]
        if not keep:
            continue
        px, py = _transform([p[0] for p in keep], [p[1] for p in keep], (x_min, x_max), y_range)
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
        out.append(
            f'<polyline class="series" fill="none" stroke="{color}" stroke-width="2" '
            f'points="{points}"/>'
        )
        ly = MARGIN_T + 16 * i
        out.append(
            f'<line x1="{WIDTH - MARGIN_R - 150}" y1="{ly}" x2="{WIDTH - MARGIN_R - 126}" '
            f'y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        out.append(
            f'<text x="{WIDTH - MARGIN_R - 120}" y="{ly + 4}" font-size="12" '
            f'font-family="sans-serif">{escape(str(label))}</text>'
        )
    out.append("</svg>")
    return "\n".join(out)


def _miou_chart(doc: dict) -> str:
    steps = [r["step"] for r in doc["steps"]]
    series = [
        ("all", steps, [r["miou_all"] for r in doc["steps"]]),
        ("initial", steps, [r["miou_init"] for r in doc["steps"]]),
        ("increments", steps, [r["miou_incr"] for r in doc["steps"]]),
    ]
    if any(r["probe_miou_all"] is not None for r in doc["steps"]):
        series.append(("probe all", steps, [r["probe_miou_all"] for r in doc["steps"]]))
    return svg_line_chart(
        series, f'{doc["name"]}: mIoU by step', "step", "mIoU (%)", y_range=(0.0, 100.0)
    )


def _md_chart(doc: dict) -> str:
    series = []
    for source in ("observed", "probing"):
        recs = [m for m in doc["md"] if m["source"] == source]
        groups = sorted({m["t"] for m in recs})
        for t in groups:
            pts = sorted(((m["k"], m["value"]) for m in recs if m["t"] == t))
            series.append((f"{source} t={t}", [t + k for k, _ in pts], [v for _, v in pts]))
    return svg_line_chart(series, f'{doc["name"]}: moving distance', "measured at step", "MD")


def write_experiment_bundle(log, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    doc = log_to_dict(log)
    with open(outdir / "experiment.json", "w") as f:
        json.dump(doc, f, indent=2)
    write_curves_csv(doc, outdir / "curves.csv")
    write_md_csv(doc, outdir / "md.csv")
    (outdir / "miou_steps.svg").write_text(_miou_chart(doc))
    if doc["md"]:
        (outdir / "md_steps.svg").write_text(_md_chart(doc))
    if log.config_text:
        (outdir / "config.txt").write_text(log.config_text)


def load_experiment_json(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "experiment.json"
    if not path.exists():
        raise ArtifactError(f"no experiment.json at {path}")
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "csslab-experiment-v1":
        raise ArtifactError(f"{path} is not a csslab experiment log")
    return doc


def write_comparison(docs: list[dict], out_stem) -> tuple[Path, Path]:
    """Combined per-step CSV plus an overlayed all-classes mIoU chart."""
    if not docs:
        raise ArtifactError("nothing to compare")
    base = docs[0]
    for doc in docs[1:]:
        if doc["schedule"] != base["schedule"] or doc["scenario"] != base["scenario"]:
            raise ArtifactError(
                f'{doc["name"]} ran schedule {doc["setting"]}/{doc["scenario"]}, '
                f'{base["name"]} ran {base["setting"]}/{base["scenario"]}; refusing to overlay'
            )
    out_stem = Path(out_stem)
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_stem.with_suffix(".csv")
    svg_path = out_stem.with_suffix(".svg")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("name",) + CURVE_COLUMNS)
        for doc in docs:
            for row in doc["steps"]:
                w.writerow([doc["name"]] + ["" if row.get(c) is None else row.get(c) for c in CURVE_COLUMNS])
    series = [
        (doc["name"], [r["step"] for r in doc["steps"]], [r["miou_all"] for r in doc["steps"]])
        for doc in docs
    ]
    svg_path.write_text(
        svg_line_chart(series, "mIoU (all classes) by step", "step", "mIoU (%)", y_range=(0.0, 100.0))
    )
    return csv_path, svg_path
