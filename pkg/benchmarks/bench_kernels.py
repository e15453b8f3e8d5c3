"""Time the numpy and numba kernel backends against each other.

Per-kernel microbenchmarks on three batch sizes, then an optional small
end-to-end experiment per backend. The first jitted call of every numba
kernel compiles it; that call happens before timing starts, so the table
shows steady-state cost only.

Run from a checkout:

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --repeats 9 --skip-e2e
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from csslab import kernels
from csslab.datagen import SynthParams
from csslab.model import Dims, Hyper


def _case(rng, P, d=16, e_h=256, e=32, K=11):
    X = rng.normal(size=(P, d))
    y = rng.integers(0, K, size=P)
    y[rng.random(P) < 0.1] = -1
    W1 = rng.normal(scale=0.3, size=(e_h, d))
    b1 = rng.normal(scale=0.1, size=e_h)
    W2 = rng.normal(scale=0.3, size=(e, e_h))
    b2 = rng.normal(scale=0.1, size=e)
    CW = rng.normal(scale=0.3, size=(K, e))
    cb = rng.normal(scale=0.1, size=K)
    Z = kernels.embed(X, W1, b1, W2, b2)
    return {
        "embed": lambda: kernels.embed(X, W1, b1, W2, b2),
        "train_full": lambda: kernels.train_full(X, y, W1, b1, W2, b2, CW, cb),
        "train_head": lambda: kernels.train_head(Z, y, CW, cb),
        "predict": lambda: kernels.predict(Z, CW, cb),
    }


def _best_ms(fn, repeats):
    fn()  # warmup; compiles on the numba backend
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_kernels(backends, repeats):
    rows = []
    for P in (512, 2048, 8192):
        timings = {}
        for backend in backends:
            kernels.use_backend(backend)
            calls = _case(np.random.default_rng(0), P)
            timings[backend] = {k: _best_ms(fn, repeats) for k, fn in calls.items()}
        for name in ("embed", "train_full", "train_head", "predict"):
            row = [name, str(P)]
            for backend in backends:
                row.append(f"{timings[backend][name]:9.3f}")
            if len(backends) == 2:
                a, b = (timings[bk][name] for bk in backends)
                row.append(f"{a / b:6.2f}x")  # first/second in listed order
            rows.append(row)
    return rows


def bench_end_to_end(backends):
    from csslab.trainer import ExperimentConfig, run_experiment

    rows = []
    for backend in backends:
        kernels.use_backend(backend)
        config = ExperimentConfig(
            seed=1,
            setting="3-1",
            strategy="dft",
            data=SynthParams(num_classes=6, seed=1),
            dims=Dims(),
            hyper=Hyper(epochs_per_step=20),
            probing=False,
            md=False,
            name=f"bench-{backend}",
        )
        run_experiment(config)  # warmup run so jit compilation stays untimed
        t0 = time.perf_counter()
        log = run_experiment(config)
        rows.append((backend, time.perf_counter() - t0, log.records[-1].observed.miou_all))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=5, help="timed calls per cell (median)")
    ap.add_argument("--skip-e2e", action="store_true", help="microbenchmarks only")
    args = ap.parse_args(argv)

    backends = list(kernels.available_backends())
    if "numba" not in backends:
        print("numba not importable: timing the numpy backend only")
    print(f"backends: {', '.join(backends)}; repeats: {args.repeats}")

    ratio = [f"{backends[0][:2]}/{backends[1][:2]}"] if len(backends) == 2 else []
    header = ["kernel", "batch"] + backends + ratio
    rows = bench_kernels(backends, args.repeats)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    for r in [header] + rows:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))

    if not args.skip_e2e:
        print("\nend to end (dft, 6 classes, 3-1, 20 epochs/step, metrics included):")
        for backend, seconds, miou in bench_end_to_end(backends):
            print(f"  {backend:>6}: {seconds:6.2f}s  final miou_all {miou:.1f}")

    kernels.use_backend("auto")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
