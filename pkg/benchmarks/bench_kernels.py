"""Compare the compiled box kernels with their pure-Python twins.

    python3 benchmarks/bench_kernels.py [--sizes 32 128 512] [--repeat 5]

Prints the best-of-``repeat`` time per call for IoU matrices, NMS and greedy
matching, and checks that both backends agree on every input.
"""
import argparse
import timeit

import numpy as np

from ssiod import _kernels_py as py

try:
    from ssiod import _kernels as cy
except ImportError:
    cy = None


def random_boxes(rng, n, size=64.0):
    xy = rng.uniform(0, size - 4, size=(n, 2))
    wh = rng.uniform(2, size / 3, size=(n, 2))
    return np.ascontiguousarray(np.hstack([xy, np.minimum(xy + wh, size)]))


def cases(n, rng):
    a, b = random_boxes(rng, n), random_boxes(rng, n)
    scores = rng.random(n)
    classes = rng.integers(0, 4, n).astype(np.intp)
    ious = py.iou_matrix(a, b)
    ignore = (rng.random(n) < 0.1).astype(np.uint8)
    return {
        "iou_matrix": ("iou_matrix", (a, b)),
        "nms": ("nms_keep", (a, scores, classes, 0.5)),
        "greedy_match": ("greedy_match", (ious, ignore, 0.5)),
    }


def best_time(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[32, 128, 512])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if cy is None:
        print("compiled kernels not built; timing the Python versions only")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<14}{'n':>6}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for n in args.sizes:
        for name, (attr, call) in cases(n, rng).items():
            t_py = best_time(getattr(py, attr), call, args.repeat)
            if cy is None:
                print(f"{name:<14}{n:>6}{1e3 * t_py:>12.3f}{'-':>12}{'-':>10}")
                continue
            np.testing.assert_array_equal(getattr(py, attr)(*call), getattr(cy, attr)(*call))
            t_cy = best_time(getattr(cy, attr), call, args.repeat)
            print(f"{name:<14}{n:>6}{1e3 * t_py:>12.3f}{1e3 * t_cy:>12.3f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
