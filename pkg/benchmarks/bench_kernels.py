"""Compare the compiled and numpy interpolation backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times bilinear and trilinear sampling with and without position gradients.
These kernels dominate every warp and every image-match gradient.
"""

import argparse
import timeit

import numpy as np

from hbatlas import kernels
from hbatlas.geodesic import identity_grid


def cases(rng):
    for full, batch in [((64, 64), 20), ((128, 128), 4), ((32, 32, 32), 2)]:
        d = len(full)
        img = rng.random((batch,) + full)
        pos = identity_grid(full) + 2.0 * rng.standard_normal((batch, d) + full)
        yield f"{'x'.join(map(str, full))} x{batch}", img, pos, d


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled backend not built; run `python3 setup.py build_ext --inplace` first")
    rng = np.random.default_rng(0)
    print(f"{'case':<16}{'grad':>6}" + "".join(f"{name:>12}" for name in impls) + f"{'speedup':>10}")
    for label, img, pos, d in cases(rng):
        for grad in (False, True):
            times = {}
            for name, impl in impls.items():
                run = lambda: kernels.sample(img, pos, d, grad=grad, impl=impl)  # noqa: E731
                run()
                times[name] = min(timeit.repeat(run, number=1, repeat=args.repeat))
            ratio = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{label:<16}{str(grad):>6}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times.values())
                  + f"{ratio:>9.1f}x")


if __name__ == "__main__":
    main()
