"""Time the compiled and numpy window kernels on dilation and erosion.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per (operation, shape, kernel size) with the best wall time of
each backend and the speed-up of the compiled one. Outputs of the two
backends are compared bit for bit before timing.
"""

import argparse
import time

import numpy as np

from haarnet import kernels
from haarnet.morpho import StructuringElement, dilate2d, erode2d
from haarnet.tensor import Tensor, backward
from haarnet.tensor import sum as tsum

CASES = [
    ((8, 16, 64, 64), 2, 2),
    ((8, 16, 64, 64), 3, 1),
    ((4, 64, 32, 32), 3, 1),
    ((1, 3, 256, 256), 5, 1),
]


def _run(op, f, se, stride, pad):
    f.grad = se.values.grad = None
    out = op(f, se, stride, pad)
    backward(tsum(out))
    return out.data, f.grad, se.values.grad


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5, help="timed repetitions per case; the best is reported")
    args = parser.parse_args()
    if "cython" not in kernels.BACKENDS:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(0)
    print(f"{'op':<7} {'shape':<18} {'k':>2} {'python ms':>10} {'cython ms':>10} {'speed-up':>9}")
    for shape, k, stride in CASES:
        f = Tensor(rng.standard_normal(shape), requires_grad=True)
        se = StructuringElement(rng.standard_normal((shape[1], k, k)), learnable=True)
        pad = (k - 1) // 2
        for name, op in (("dilate", dilate2d), ("erode", erode2d)):
            timings, results = {}, {}
            for backend in ("python", "cython"):
                kernels.use_backend(backend)
                results[backend] = [r.copy() for r in _run(op, f, se, stride, pad)]
                timings[backend] = _best(lambda: _run(op, f, se, stride, pad), args.repeat)
            for a, b in zip(results["python"], results["cython"]):
                np.testing.assert_array_equal(a, b)
            py, cy = timings["python"] * 1e3, timings["cython"] * 1e3
            print(f"{name:<7} {str(shape):<18} {k:>2} {py:>10.2f} {cy:>10.2f} {py / cy:>8.1f}x")


if __name__ == "__main__":
    main()
