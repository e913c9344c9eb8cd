# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the per-token gradient kernels.

Signatures and semantics match ``sadp.kernels._fallback`` exactly.
"""

import numpy as np

from libc.math cimport exp, log, sqrt, isfinite, fabs


cdef double _row_norm(const double[:, ::1] g, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t j, p = g.shape[1]
    cdef double s = 0.0, scale = 0.0, v
    for j in range(p):
        s += g[i, j] * g[i, j]
    if isfinite(s):
        return sqrt(s)
    # Overflow with finite entries: rescale by the largest magnitude.
    for j in range(p):
        if fabs(g[i, j]) > scale:
            scale = fabs(g[i, j])
    s = 0.0
    for j in range(p):
        v = g[i, j] / scale
        s += v * v
    return scale * sqrt(s)


def clip_rows(double[:, ::1] g, double clip_norm):
    """Scale each row of ``g`` in place to L2 norm at most ``clip_norm``.

    Returns the per-row scale factors. Raises ``ValueError`` naming the first
    row holding a non-finite entry.
    """
    cdef Py_ssize_t n = g.shape[0], p = g.shape[1], i, j
    cdef double norm, c
    factors = np.ones(n, dtype=np.float64)
    cdef double[::1] f = factors
    for i in range(n):
        for j in range(p):
            if not isfinite(g[i, j]):
                raise ValueError(f"non-finite gradient entry at token {i}")
    with nogil:
        for i in range(n):
            norm = _row_norm(g, i)
            if norm > clip_norm:
                c = clip_norm / norm
                f[i] = c
                for j in range(p):
                    g[i, j] = g[i, j] * c
    return factors


def softmax_xent(double[:, ::1] logits, const long[::1] targets):
    """Turn ``logits`` into ``softmax - onehot(target)`` in place.

    Returns the per-row negative log-likelihood of the target.
    """
    cdef Py_ssize_t n = logits.shape[0], v = logits.shape[1], i, j
    cdef double m, s, zt
    losses = np.empty(n, dtype=np.float64)
    cdef double[::1] out = losses
    with nogil:
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > m:
                    m = logits[i, j]
            zt = logits[i, targets[i]]
            s = 0.0
            for j in range(v):
                logits[i, j] = exp(logits[i, j] - m)
                s += logits[i, j]
            out[i] = log(s) + m - zt
            for j in range(v):
                logits[i, j] = logits[i, j] / s
            logits[i, targets[i]] -= 1.0
    return losses


def segment_sq_norms(
    const double[:, ::1] x,
    const double[:, ::1] r,
    const double[:, ::1] wr,
    const long[::1] tokens,
    const long[::1] seg,
):
    """Squared L2 norm of each segment's summed gradient, without materializing it.

    Row ``i`` stands for the gradient of one position of the embedding-softmax
    model: ``outer(x_i, r_i)`` for the output matrix, ``r_i`` for the bias and
    ``wr_i`` scattered into embedding row ``tokens[i]``. Segment ``k`` covers
    rows ``seg[k]:seg[k+1]``.
    """
    cdef Py_ssize_t m = seg.shape[0] - 1, d = x.shape[1], v = r.shape[1]
    cdef Py_ssize_t k, a, b, i, j, c
    cdef double total, xx, rr, ww, mult
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for k in range(m):
            a = seg[k]
            b = seg[k + 1]
            total = 0.0
            for i in range(a, b):
                for j in range(i, b):
                    mult = 1.0 if i == j else 2.0
                    xx = 0.0
                    for c in range(d):
                        xx = xx + x[i, c] * x[j, c]
                    rr = 0.0
                    for c in range(v):
                        rr = rr + r[i, c] * r[j, c]
                    total = total + mult * (xx * rr + rr)
                    if tokens[i] == tokens[j]:
                        ww = 0.0
                        for c in range(d):
                            ww = ww + wr[i, c] * wr[j, c]
                        total = total + mult * ww
            o[k] = total if total > 0.0 else 0.0
    return out


def scatter_add_rows(
    double[:, ::1] out,
    const long[::1] idx,
    const double[:, ::1] rows,
    const double[::1] weights,
):
    """``out[idx[i]] += weights[i] * rows[i]`` for every ``i``, in order."""
    cdef Py_ssize_t n = rows.shape[0], d = rows.shape[1], i, c
    cdef long t
    cdef double w
    with nogil:
        for i in range(n):
            t = idx[i]
            w = weights[i]
            for c in range(d):
                out[t, c] = out[t, c] + w * rows[i, c]
