#!/usr/bin/env python3
"""Numba kernels against their numpy fallbacks.

Part one times each kernel pair in this process (both are importable when
numba is installed) and checks they agree. Part two times one forward and
backward pass of cnn3d-small in two subprocesses, one with
VCNN_DISABLE_NUMBA=1, so the env-flag switch itself is exercised.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--skip-model]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

STEP_SCRIPT = r"""
import json, sys, time
import numpy as np
from vcnn import backend, layers as L, model as M
m = M.init_params(M.build_model_3d_small(), 0)
rng = np.random.default_rng(0)
x = rng.random((4,) + tuple(m.input_shape)).astype(np.float32)
y = np.array([0, 1, 2, 0])
times = []
for i in range(int(sys.argv[1]) + 1):
    t = time.perf_counter()
    logits, caches = M.forward(m, x, mode="train", rng=np.random.default_rng(i))
    _, g = L.softmax_cross_entropy(logits.astype(np.float64), y)
    M.backward(m, g.astype(np.float32), caches)
    times.append(time.perf_counter() - t)
print(json.dumps({"backend": backend(), "first": times[0], "best": min(times[1:])}))
"""


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 16, 16, 16, 8))
    w = rng.standard_normal((3, 3, 3, 8, 16))
    g = rng.standard_normal((4, 14, 14, 14, 16))
    xp = rng.standard_normal((4, 16, 16, 16, 16))
    gp = rng.standard_normal((4, 8, 8, 8, 16))
    return [
        ("conv_forward", lambda K: K(x, w), "conv_forward"),
        ("conv_grad_weight", lambda K: K(x, g, w.shape[:3]), "conv_grad_weight"),
        ("conv_grad_input", lambda K: K(g, w, x.shape), "conv_grad_input"),
        ("maxpool_forward", lambda K: K(xp, (2, 2, 2), (2, 2, 2)), "maxpool_forward"),
        ("maxpool_backward", None, "maxpool_backward"),
    ], (xp, gp)


def run_kernels(repeat):
    from vcnn import kernels
    if not kernels.HAS_NUMBA:
        print("numba unavailable (or disabled); kernel comparison skipped")
        return
    cases, (xp, gp) = kernel_cases()
    _, arg = kernels.maxpool_forward_np(xp, (2, 2, 2), (2, 2, 2))
    print(f"{'kernel':<20}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max |diff|':>13}")
    for name, call, attr in cases:
        if call is None:
            def call(K):
                return K(gp, arg, xp.shape, (2, 2, 2), (2, 2, 2))
        nb_fn = getattr(kernels, attr + "_nb")
        np_fn = getattr(kernels, attr + "_np")
        a, b = call(nb_fn), call(np_fn)
        a, b = (a[0], b[0]) if isinstance(a, tuple) else (a, b)
        diff = float(np.max(np.abs(a - b)))
        t_nb = best_of(lambda: call(nb_fn), repeat)
        t_np = best_of(lambda: call(np_fn), repeat)
        print(f"{name:<20}{1e3 * t_nb:>10.2f}{1e3 * t_np:>10.2f}{t_np / t_nb:>8.2f}x{diff:>13.2e}")


def run_model(repeat):
    print("\ncnn3d-small forward+backward, batch 4 (separate processes)")
    results = {}
    for flag in ("0", "1"):
        env = dict(os.environ, VCNN_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT, str(repeat)], env=env,
                             capture_output=True, text=True, check=True)
        r = json.loads(out.stdout.strip().splitlines()[-1])
        results[r["backend"]] = r
        print(f"  {r['backend']:<6} first {r['first']:.2f} s   best {r['best']:.3f} s")
    if len(results) == 2:
        print(f"  speedup {results['numpy']['best'] / results['numba']['best']:.2f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-model", action="store_true")
    args = ap.parse_args()
    run_kernels(args.repeat)
    if not args.skip_model:
        run_model(args.repeat)


if __name__ == "__main__":
    main()
