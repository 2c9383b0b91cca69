# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: retrieval selection scan and fused Adam update.

Both must reproduce the pure-NumPy reference implementations in
cotrec._accel element-for-element, including tie handling.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline int _insert_ranked(double* bsim, long long* bidx, int size, int cap,
                               double sim, long long idx) nogil:
    """Bounded insertion keeping (sim desc, idx asc) order.

    Candidates arrive in ascending index order, so a strict sim comparison
    places equal-similarity entries after earlier (lower) indices.
    """
    cdef int pos = size
    while pos > 0 and sim > bsim[pos - 1]:
        pos -= 1
    if pos >= cap:
        return size
    cdef int end = size if size < cap else cap - 1
    cdef int j = end
    while j > pos:
        bsim[j] = bsim[j - 1]
        bidx[j] = bidx[j - 1]
        j -= 1
    bsim[pos] = sim
    bidx[pos] = idx
    if size < cap:
        return size + 1
    return size


def balanced_select(double[::1] sims, long long[::1] timestamps, signed char[::1] labels,
                    long long query_ts, long long exclude, int k, int balance,
                    int anti_leakage):
    cdef Py_ssize_t n = sims.shape[0]
    cdef int fill = 0
    if k <= 0 or n == 0:
        return np.empty(0, dtype=np.int64), 0

    cdef cnp.ndarray[cnp.float64_t, ndim=1] psim_a = np.empty(k, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] pidx_a = np.empty(k, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] nsim_a = np.empty(k, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] nidx_a = np.empty(k, dtype=np.int64)
    cdef double* psim = <double*> psim_a.data
    cdef long long* pidx = <long long*> pidx_a.data
    cdef double* nsim = <double*> nsim_a.data
    cdef long long* nidx = <long long*> nidx_a.data

    cdef int npos = 0, nneg = 0
    cdef Py_ssize_t i
    for i in range(n):
        if anti_leakage and timestamps[i] >= query_ts:
            continue
        if i == exclude:
            continue
        if balance and labels[i] == 1:
            npos = _insert_ranked(psim, pidx, npos, k, sims[i], i)
        elif balance:
            nneg = _insert_ranked(nsim, nidx, nneg, k, sims[i], i)
        else:
            npos = _insert_ranked(psim, pidx, npos, k, sims[i], i)

    cdef int half, take_pos, take_neg, short_pos, short_neg, extra
    cdef int nsel = 0
    cdef cnp.ndarray[cnp.int64_t, ndim=1] sel_a = np.empty(k, dtype=np.int64)
    cdef long long* sel = <long long*> sel_a.data
    cdef int j
    if balance:
        half = k // 2
        take_pos = half if npos > half else npos
        take_neg = half if nneg > half else nneg
        short_pos = half - take_pos
        short_neg = half - take_neg
        if short_pos > 0:
            extra = nneg - half
            if extra < 0:
                extra = 0
            if extra > short_pos:
                extra = short_pos
            take_neg += extra
            fill += extra
        if short_neg > 0:
            extra = npos - half
            if extra < 0:
                extra = 0
            if extra > short_neg:
                extra = short_neg
            take_pos += extra
            fill += extra
        for j in range(take_pos):
            sel[nsel] = pidx[j]
            nsel += 1
        for j in range(take_neg):
            sel[nsel] = nidx[j]
            nsel += 1
    else:
        nsel = npos if npos < k else k
        for j in range(nsel):
            sel[j] = pidx[j]

    # Final order: (similarity asc, index asc) via insertion sort over <= k items.
    cdef long long key_idx
    cdef double key_sim
    cdef int p
    for j in range(1, nsel):
        key_idx = sel[j]
        key_sim = sims[key_idx]
        p = j - 1
        while p >= 0 and (sims[sel[p]] > key_sim or
                          (sims[sel[p]] == key_sim and sel[p] > key_idx)):
            sel[p + 1] = sel[p]
            p -= 1
        sel[p + 1] = key_idx
    return sel_a[:nsel].copy(), fill


def adam_update(double[::1] param, double[::1] grad, double[::1] m, double[::1] v,
                long long step, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t n = param.shape[0]
    cdef double c1 = 1.0 - beta1 ** step
    cdef double c2 = 1.0 - beta2 ** step
    cdef Py_ssize_t i
    cdef double g
    with nogil:
        for i in range(n):
            g = grad[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            param[i] -= lr * (m[i] / c1) / (sqrt(v[i] / c2) + eps)
