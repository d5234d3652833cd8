"""Time the compiled kernels against the pure-Python fallback.

Run ``python3 benchmarks/bench_kernels.py``. Each kernel is checked for
agreement between backends before it is timed.
"""

import argparse
import timeit

import numpy as np

from ptrag import kernels


def _best(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 1 << 16:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def cases():
    rng = np.random.default_rng(0)
    for n in (16, 64, 256):
        cost = rng.random((n, n))
        yield f"linear_assignment n={n}", "linear_assignment", (cost,)
    for n, m in ((10, 10), (20, 20)):
        yield f"mwu_null_counts {n}x{m}", "mwu_null_counts", (n, m)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    compiled = kernels.compiled_backend
    if compiled is None:
        print("compiled extension not available; timing the Python fallback only")
    print(f"{'kernel':<28} {'python':>12} {'compiled':>12} {'speedup':>8}")
    for label, name, inputs in cases():
        py_fn = getattr(kernels.python_backend, name)
        t_py = _best(lambda: py_fn(*inputs), args.repeat)
        if compiled is None:
            print(f"{label:<28} {t_py * 1e3:>10.3f}ms")
            continue
        c_fn = getattr(compiled, name)
        assert np.array_equal(np.asarray(py_fn(*inputs)), np.asarray(c_fn(*inputs))), label
        t_c = _best(lambda: c_fn(*inputs), args.repeat)
        print(f"{label:<28} {t_py * 1e3:>10.3f}ms {t_c * 1e3:>10.3f}ms {t_py / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
