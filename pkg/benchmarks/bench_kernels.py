"""Time the compiled integer kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from fxsolve import _kernels_py

try:
    from fxsolve import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    acc = rng.integers(-2**40, 2**40, size=65_536)
    w = rng.integers(-127, 128, size=(16, 16, 16, 16))
    x = rng.integers(-127, 128, size=(16, 1, 16, 2))
    grid = rng.integers(-127, 128, size=(102, 128))
    stencil = rng.integers(-127, 128, size=(9, 9))
    return {
        "requantize_shift 64k": lambda m: m.requantize_shift(acc, 20, 8, "trunc"),
        "block_multiply 256x256 (16 row x 16 col blocks)": lambda m: m.block_multiply(w, x),
        "stencil_conv 102x128 * 9x9": lambda m: m.stencil_conv(grid, stencil),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    impls = {"python": _kernels_py}
    if _kernels is not None:
        impls["cython"] = _kernels
    else:
        print("compiled kernels not built; timing the fallback only")
    print(f"{'kernel':50s} " + " ".join(f"{k:>10s}" for k in impls) + "   speedup")
    for name, fn in cases(rng).items():
        times = {}
        for key, mod in impls.items():
            number = 3
            t = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat))
            times[key] = t / number
        speed = (f"{times['python'] / times['cython']:8.1f}x" if "cython" in times else "")
        print(f"{name:50s} " + " ".join(f"{times[k] * 1e3:8.2f}ms" for k in impls)
              + f"  {speed}")


if __name__ == "__main__":
    main()
