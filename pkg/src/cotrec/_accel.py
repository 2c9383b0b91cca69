"""Hot-kernel dispatch: compiled Cython implementations when available,
pure-NumPy fallbacks otherwise.

The two selected-at-import kernels are the per-query retrieval selection scan
(branchy, runs once per training example per step) and the fused Adam update
(touches every parameter every step). Both fallbacks are the normative
reference; the compiled paths must match them element-for-element
(see tests/test_kernels.py and benchmarks/bench_kernels.py).

Set ``COTREC_FORCE_PURE=1`` to ignore the compiled extension.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _kernels as _ext
except ImportError:  # extension not built; pure paths take over
    _ext = None

if os.environ.get("COTREC_FORCE_PURE") == "1":
    _ext = None

HAVE_EXT = _ext is not None


def backend() -> str:
    return "cython" if HAVE_EXT else "pure"


def balanced_select_pure(sims: np.ndarray, timestamps: np.ndarray, labels: np.ndarray,
                         query_ts: int, exclude: int, k: int, balance: bool,
                         anti_leakage: bool) -> tuple[np.ndarray, int]:
    """Select up to k record indices for one query.

    Eligibility: timestamp strictly before ``query_ts`` when ``anti_leakage``
    is on, and never the ``exclude`` index (-1 disables). With ``balance`` on,
    take the k/2 most similar records of each label; a class shortfall is
    filled from the other class (the fill count is returned). Selection rank
    is (similarity desc, index asc); the returned order is
    (similarity asc, index asc).
    """
    sims = np.asarray(sims, dtype=np.float64)
    n = sims.shape[0]
    empty = np.empty(0, dtype=np.int64)
    if k <= 0 or n == 0:
        return empty, 0
    eligible = np.ones(n, dtype=bool)
    if anti_leakage:
        eligible &= np.asarray(timestamps) < query_ts
    if 0 <= exclude < n:
        eligible[exclude] = False
    cand = np.nonzero(eligible)[0]
    if cand.size == 0:
        return empty, 0
    ranked = cand[np.lexsort((cand, -sims[cand]))]  # sim desc, index asc

    fill = 0
    if balance:
        half = k // 2
        lab = np.asarray(labels)[ranked]
        pos = ranked[lab == 1]
        neg = ranked[lab != 1]
        take_pos = pos[:half]
        take_neg = neg[:half]
        short_pos = half - take_pos.size
        short_neg = half - take_neg.size
        if short_pos > 0:
            extra = neg[half:half + short_pos]
            take_neg = np.concatenate([take_neg, extra])
            fill += extra.size
        if short_neg > 0:
            extra = pos[half:half + short_neg]
            take_pos = np.concatenate([take_pos, extra])
            fill += extra.size
        sel = np.concatenate([take_pos, take_neg])
    else:
        sel = ranked[:k]
    out = sel[np.lexsort((sel, sims[sel]))]  # sim asc, index asc
    return out.astype(np.int64), int(fill)


def adam_update_pure(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                     step: int, lr: float, beta1: float, beta2: float, eps: float) -> None:
    """In-place bias-corrected Adam update for one parameter tensor."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def balanced_select(sims, timestamps, labels, query_ts, exclude, k, balance,
                    anti_leakage) -> tuple[np.ndarray, int]:
    if _ext is not None:
        idx, fill = _ext.balanced_select(
            np.ascontiguousarray(sims, dtype=np.float64),
            np.ascontiguousarray(timestamps, dtype=np.int64),
            np.ascontiguousarray(labels, dtype=np.int8),
            int(query_ts), int(exclude), int(k), int(bool(balance)),
            int(bool(anti_leakage)))
        return idx, fill
    return balanced_select_pure(sims, timestamps, labels, query_ts, exclude,
                                k, balance, anti_leakage)


def adam_update(param, grad, m, v, step, lr, beta1, beta2, eps) -> None:
    if _ext is not None and param.flags.c_contiguous:
        _ext.adam_update(param.reshape(-1), grad.reshape(-1), m.reshape(-1),
                         v.reshape(-1), int(step), float(lr), float(beta1),
                         float(beta2), float(eps))
        return
    adam_update_pure(param, grad, m, v, step, lr, beta1, beta2, eps)
