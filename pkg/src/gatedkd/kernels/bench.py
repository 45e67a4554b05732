"""Benchmark the compiled kernel backend against the numpy fallback.

Runs each kernel over grid shapes spanning attention rows (short, wide
batches) up to loss grids (many rows x vocab) and prints per-call timings
for every available backend.

Usage:
    python -m gatedkd.kernels.bench [--repeats N]
"""

import argparse
import time

import numpy as np

from gatedkd import kernels

SHAPES = [(64, 16), (256, 50), (512, 104), (2048, 104), (4096, 512)]


def _time_call(fn, args, repeats: int) -> float:
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def run(repeats: int = 20) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    backends = kernels.available_backends()
    for n, v in SHAPES:
        z = rng.normal(size=(n, v))
        g = rng.normal(size=(n, v))
        logp = kernels.active().log_softmax(z, 1.0)
        p = np.exp(logp)
        cases = {
            "log_softmax": (lambda be: be.log_softmax, (z, 1.0)),
            "log_softmax_grad": (lambda be: be.log_softmax_grad, (logp, g, 1.0)),
            "softmax": (lambda be: be.softmax, (z, 1.0)),
            "softmax_grad": (lambda be: be.softmax_grad, (p, g, 1.0)),
            "row_entropy": (lambda be: be.row_entropy, (p,)),
        }
        for name, (get, args) in cases.items():
            timings = {}
            for backend in backends:
                be = kernels._BACKENDS[backend]
                timings[backend] = _time_call(get(be), args, repeats)
            rows.append({"kernel": name, "shape": (n, v), "timings": timings})
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    print(f"available backends: {', '.join(backends)} (active: {kernels.backend_name()})")
    header = f"{'kernel':<18} {'shape':<12}" + "".join(f" {b:>12}" for b in backends)
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print(header)
    for row in run(args.repeats):
        shape = "x".join(str(s) for s in row["shape"])
        line = f"{row['kernel']:<18} {shape:<12}"
        for b in backends:
            line += f" {row['timings'][b] * 1e6:>10.1f}us"
        if len(backends) == 2:
            ratio = row["timings"]["python"] / row["timings"]["compiled"]
            line += f" {ratio:>8.2f}x"
        print(line)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
