#!/usr/bin/env python3
"""Time the compiled hot kernels against their pure-NumPy fallbacks.

Covers the two selected-at-import kernels: the per-query retrieval
selection scan and the fused Adam update. Outputs are checked for
agreement before any timing so a fast-but-wrong build fails loudly.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 30 --seed 7
"""

import argparse
import time

import numpy as np

from cotrec import _accel

SELECT_SIZES = (1_000, 10_000, 100_000)
ADAM_SIZES = (10_000, 200_000, 1_000_000)


def best_of(fn, repeats, inner):
    """Best per-call seconds over ``repeats`` samples of ``inner`` calls."""
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - start) / inner)
    return best


def fmt(seconds):
    if seconds < 1e-3:
        return f"{seconds * 1e6:8.1f} us"
    return f"{seconds * 1e3:8.2f} ms"


def select_case(rng, n):
    sims = rng.uniform(-1.0, 1.0, size=n)
    timestamps = rng.integers(0, 1_000_000, size=n)
    labels = rng.integers(0, 2, size=n).astype(np.int8)
    query_ts = int(np.median(timestamps))
    exclude = int(rng.integers(0, n))
    return sims, timestamps, labels, query_ts, exclude


def bench_select(rng, repeats, rows):
    for n in SELECT_SIZES:
        sims, ts, labels, query_ts, exclude = select_case(rng, n)
        args = (sims, ts, labels, query_ts, exclude, 4, True, True)
        pure_idx, pure_fill = _accel.balanced_select_pure(*args)
        if _accel.HAVE_EXT:
            ext_idx, ext_fill = _accel.balanced_select(*args)
            if not np.array_equal(pure_idx, ext_idx) or pure_fill != ext_fill:
                raise SystemExit(f"balanced_select disagreement at n={n}: "
                                 f"{ext_idx} vs {pure_idx}")
        inner = max(1, 200_000 // n)
        pure_t = best_of(lambda: _accel.balanced_select_pure(*args),
                         repeats, inner)
        ext_t = (best_of(lambda: _accel.balanced_select(*args), repeats, inner)
                 if _accel.HAVE_EXT else None)
        rows.append(("balanced_select", n, pure_t, ext_t))


def bench_adam(rng, repeats, rows):
    for n in ADAM_SIZES:
        param = rng.normal(size=n)
        grad = rng.normal(size=n)
        m = rng.normal(size=n) * 0.1
        v = np.abs(rng.normal(size=n)) * 0.1
        if _accel.HAVE_EXT:
            p_pure, m_pure, v_pure = param.copy(), m.copy(), v.copy()
            _accel.adam_update_pure(p_pure, grad, m_pure, v_pure, 3,
                                    1e-3, 0.9, 0.999, 1e-8)
            p_ext, m_ext, v_ext = param.copy(), m.copy(), v.copy()
            _accel.adam_update(p_ext, grad, m_ext, v_ext, 3,
                               1e-3, 0.9, 0.999, 1e-8)
            drift = float(np.abs(p_ext - p_pure).max())
            if drift > 1e-12:
                raise SystemExit(f"adam_update disagreement at n={n}: "
                                 f"max |diff| {drift:.2e}")
        inner = max(1, 2_000_000 // n)

        def run_pure():
            _accel.adam_update_pure(param.copy(), grad, m.copy(), v.copy(),
                                    3, 1e-3, 0.9, 0.999, 1e-8)

        def run_ext():
            _accel.adam_update(param.copy(), grad, m.copy(), v.copy(),
                               3, 1e-3, 0.9, 0.999, 1e-8)

        pure_t = best_of(run_pure, repeats, inner)
        ext_t = best_of(run_ext, repeats, inner) if _accel.HAVE_EXT else None
        rows.append(("adam_update", n, pure_t, ext_t))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20,
                        help="timing samples per case (best is kept)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    print(f"backend: {_accel.backend()}"
          + ("" if _accel.HAVE_EXT else
             " (extension not built; pure timings only)"))
    rng = np.random.default_rng(args.seed)
    rows = []
    bench_select(rng, args.repeats, rows)
    bench_adam(rng, args.repeats, rows)

    print(f"\n{'kernel':<16} {'size':>9} {'pure':>12} {'cython':>12} {'speedup':>8}")
    for kernel, n, pure_t, ext_t in rows:
        if ext_t is None:
            print(f"{kernel:<16} {n:>9} {fmt(pure_t):>12} {'-':>12} {'-':>8}")
        else:
            print(f"{kernel:<16} {n:>9} {fmt(pure_t):>12} {fmt(ext_t):>12} "
                  f"{pure_t / ext_t:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
