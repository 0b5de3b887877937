"""Time the jitted kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json]

Shapes follow the desk-scale model's layers plus one larger map. The first
numba call (compilation) is excluded; outputs are checked for agreement
before timing.
"""
import argparse
import json
import sys
import time

import numpy as np

from tiletrain.kernels import load_backend

CASES = [
    # name, channels in, map side, channels out, kernel, stride
    ("conv 3->8 @48", 3, 48, 8, 3, 1),
    ("conv 16->16 @24", 16, 24, 16, 3, 1),
    ("conv 32->64 @64", 32, 64, 64, 3, 1),
    ("conv 16->16 @24 s2", 16, 24, 16, 3, 2),
]


def _inputs(c, side, f, k, stride, rng):
    x = rng.uniform(-1, 1, (c, side + k - 1, side + k - 1)).astype(np.float32)
    w = rng.uniform(-1, 1, (k, k, c, f)).astype(np.float32)
    out = (side - 1) // stride + 1
    dz = rng.uniform(-1, 1, (f, out, out)).astype(np.float32)
    return x, w, dz


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(repeat):
    nb, npy = load_backend("numba"), load_backend("numpy")
    rng = np.random.default_rng(0)
    rows = []
    for name, c, side, f, k, s in CASES:
        x, w, dz = _inputs(c, side, f, k, s, rng)
        pooled = np.ascontiguousarray(x[:, :side, :side])
        kernels = {
            "conv_valid": (lambda b: b.conv_valid(x, w, s), True),
            "wgrad_valid": (lambda b: b.wgrad_valid(x, dz, k, s), False),
            "maxpool_valid": (lambda b: b.maxpool_valid(pooled, 2, 2), True),
        }
        for kname, (call, exact) in kernels.items():
            a, b = call(nb), call(npy)
            a0, b0 = (a[0], b[0]) if isinstance(a, tuple) else (a, b)
            agree = np.array_equal(a0, b0) if exact else np.allclose(a0, b0, rtol=1e-6, atol=1e-6)
            t_nb = best_of(lambda: call(nb), repeat)
            t_np = best_of(lambda: call(npy), repeat)
            rows.append({"case": name, "kernel": kname, "numba_s": t_nb, "numpy_s": t_np,
                         "speedup": t_np / t_nb if t_nb else float("inf"), "agree": bool(agree)})
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true", help="JSON lines instead of a table")
    args = ap.parse_args(argv)
    rows = run(args.repeat)
    if args.json:
        for r in rows:
            print(json.dumps(r))
    else:
        print(f"{'case':22} {'kernel':14} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}  agree")
        for r in rows:
            print(f"{r['case']:22} {r['kernel']:14} {1e3 * r['numba_s']:10.3f} {1e3 * r['numpy_s']:10.3f} "
                  f"{r['speedup']:8.2f}  {r['agree']}")
    return 0 if all(r["agree"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
