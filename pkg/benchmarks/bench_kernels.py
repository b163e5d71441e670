"""Compare the compiled optimizer kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 1000 100000 1000000] [--repeat 5] [--world]

``--world`` also times a few demo iterations end to end under each backend
(the fallback is forced in a subprocess with GRADMIRROR_PURE_PYTHON=1).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gradmirror import kernels

try:
    from gradmirror import _kernels
except ImportError:
    _kernels = None

ADAM_ARGS = (1.0, 1e-3, 0.9, 0.1, 0.999, 0.001, 0.1, 0.002, 1e-8, 0.01)

WORLD_SNIPPET = """
import time
from gradmirror import cli, config, kernels
from gradmirror.world import World
cfg = config.load(cli.resolve_config("demo")).replace(iterations={iters})
t = time.perf_counter()
World(cfg).run()
print(kernels.BACKEND, time.perf_counter() - t)
"""


def _arrays(n, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(n).astype(np.float32) for _ in range(3)] + [np.abs(rng.standard_normal(n)).astype(np.float32)]


def bench(fn, n, repeat, kind):
    p, g, m, v = _arrays(n)
    if kind == "adamw":
        call = lambda: fn(p, g, m, v, *ADAM_ARGS)  # noqa: E731
    else:
        call = lambda: fn(p, g, m, 1.0, 1e-2, 0.9)  # noqa: E731
    number = max(1, 2_000_000 // n)
    return min(timeit.repeat(call, number=number, repeat=repeat)) / number


def check_equal(n):
    a, b = _arrays(n, 1), _arrays(n, 1)
    kernels.adamw_update_py(*a, *ADAM_ARGS)
    _kernels.adamw_update(*b, *ADAM_ARGS)
    return all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1_000, 100_000, 1_000_000])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--world", action="store_true")
    ap.add_argument("--world-iterations", type=int, default=5)
    args = ap.parse_args(argv)

    if _kernels is None:
        print("compiled extension not built; only the fallback is available")
    print(f"{'kernel':<8}{'elements':>12}{'fallback us':>14}{'compiled us':>14}{'speedup':>10}  bit-equal")
    for kind, py, c in (("adamw", kernels.adamw_update_py, getattr(_kernels, "adamw_update", None)),
                        ("sgd", kernels.sgd_update_py, getattr(_kernels, "sgd_update", None))):
        for n in args.sizes:
            tp = bench(py, n, args.repeat, kind) * 1e6
            if c is None:
                print(f"{kind:<8}{n:>12}{tp:>14.1f}{'-':>14}{'-':>10}")
                continue
            tc = bench(c, n, args.repeat, kind) * 1e6
            same = check_equal(n) if kind == "adamw" else ""
            print(f"{kind:<8}{n:>12}{tp:>14.1f}{tc:>14.1f}{tp / tc:>9.2f}x  {same}")

    if args.world:
        code = WORLD_SNIPPET.format(iters=args.world_iterations)
        for pure in ("", "1"):
            env = {**os.environ, "GRADMIRROR_PURE_PYTHON": pure} if pure else {
                k: v for k, v in os.environ.items() if k != "GRADMIRROR_PURE_PYTHON"}
            out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
            backend, secs = out.stdout.split()
            print(f"demo x{args.world_iterations} iterations, {backend}: {float(secs):.2f}s")


if __name__ == "__main__":
    main()
