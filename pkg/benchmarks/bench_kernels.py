"""Compiled vs pure-Python kernel timings, plus one training step on each backend.

Run with ``python3 benchmarks/bench_kernels.py``.  Both backends produce
bit-identical results; the script checks that before timing.
"""

import argparse
import importlib
import os
import subprocess
import sys
import timeit

import numpy as np

from neq import kernels


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    cases = {
        "matmul_tn 800x72 . 800x16": ("matmul_tn", (rng.standard_normal((800, 72)), rng.standard_normal((800, 16)))),
        "matmul_nn 100x256 . 256x10": ("matmul_nn", (rng.standard_normal((100, 256)), rng.standard_normal((256, 10)))),
        "column_sums 6400x16": ("column_sums", (rng.standard_normal((6400, 16)),)),
    }
    try:
        compiled = kernels.backend_module("compiled")
    except ImportError:
        compiled = None
    python = kernels.backend_module("python")
    print(f"{'kernel':32s} {'compiled ms':>12s} {'python ms':>10s} {'numpy ms':>9s}")
    for label, (name, args) in cases.items():
        args = tuple(a.astype(np.float32) for a in args)
        a = getattr(compiled, name)(*args) if compiled else None
        b = getattr(python, name)(*args)
        if a is not None and not np.array_equal(a, b):
            raise SystemExit(f"{label}: backends disagree")
        row = [label]
        for mod in (compiled, python):
            if mod is None:
                row.append(float("nan"))
                continue
            fn = getattr(mod, name)
            row.append(1e3 * min(timeit.repeat(lambda: fn(*args), number=5, repeat=repeat)) / 5)
        ref = {"matmul_tn": lambda x, y: x.T @ y, "matmul_nn": lambda x, y: x @ y,
               "column_sums": lambda x: x.sum(axis=0)}[name]
        row.append(1e3 * min(timeit.repeat(lambda: ref(*args), number=5, repeat=repeat)) / 5)
        print(f"{row[0]:32s} {row[1]:12.3f} {row[2]:10.3f} {row[3]:9.3f}")


STEP_SCRIPT = """
import time, numpy as np
from neq import kernels
from neq.layers import build_model
from neq.engine import backward
rng = np.random.default_rng(0)
model = build_model("smallcnn", (1, 8, 8), 10, [8, 16], seed=0)
x = rng.standard_normal((100, 1, 8, 8)).astype(np.float32)
y = rng.integers(0, 10, 100)
def step():
    rec = model.loss(x, y, training=True)
    return backward(rec, 1.0)
step()
times = []
for _ in range({repeat}):
    t0 = time.perf_counter()
    step()
    times.append(time.perf_counter() - t0)
best = min(times)
print(kernels.BACKEND, best * 1e3)
"""


def bench_step(repeat):
    print("\ntraining step (smallcnn [8,16], batch 100, forward + backward)")
    for backend in ("compiled", "python"):
        env = dict(os.environ, NEQ_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.replace("{repeat}", str(repeat))],
                             env=env, capture_output=True, text=True)
        if out.returncode:
            print(f"  {backend}: unavailable ({out.stderr.strip().splitlines()[-1]})")
            continue
        name, ms = out.stdout.split()
        print(f"  {name:9s} {float(ms):8.2f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"active backend: {kernels.BACKEND}\n")
    bench_kernels(args.repeat)
    bench_step(args.repeat)


if __name__ == "__main__":
    main()
