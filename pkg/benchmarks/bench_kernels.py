"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints best-of-N wall time per kernel and the speed-up of the compiled core.
Outputs of the two backends are checked for bit equality before timing.
"""
import argparse
import time

import numpy as np

from csrecon import kernels


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        tic = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - tic)
    return best


def cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 32, 64, 64)).astype(np.float32)
    cols = rng.standard_normal((32 * 9, 4 * 64 * 64)).astype(np.float32)
    g = rng.standard_normal((4, 32, 32, 32)).astype(np.float32)
    return {
        "bridson 218x170 d=2.2": lambda k: k.bridson(218.0, 170.0, 2.2, 12345, 30),
        "im2col3x3 4x32x64x64": lambda k: k.im2col3x3(x),
        "col2im3x3 4x32x64x64": lambda k: k.col2im3x3(cols, x.shape),
        "maxpool2x2 4x32x64x64": lambda k: k.maxpool2x2(x),
        "maxpool2x2_backward": lambda k: k.maxpool2x2_backward(g, kernels.get_backend("python").maxpool2x2(x)[1]),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    py = kernels.get_backend("python")
    if not kernels.compiled_available():
        print("compiled backend not built; only the Python backend is available")
        return 1
    c = kernels.get_backend("compiled")
    print(f"{'kernel':<26s} {'python ms':>10s} {'compiled ms':>12s} {'speed-up':>9s}")
    for name, fn in cases().items():
        a, b = fn(py), fn(c)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            assert np.array_equal(u, v), f"backends disagree on {name}"
        t_py = best_time(lambda: fn(py), args.repeat)
        t_c = best_time(lambda: fn(c), args.repeat)
        print(f"{name:<26s} {1e3 * t_py:10.2f} {1e3 * t_c:12.2f} {t_py / t_c:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
