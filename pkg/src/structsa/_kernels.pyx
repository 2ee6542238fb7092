"""Compiled kernels for the attention hot loops.

Mirrors `structsa._kernels_np`. Parallel loops split work so that every
output element is written by exactly one thread with a fixed inner reduction
order, which keeps results bit-identical for any thread count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

ctypedef fused real:
    float
    double


def gather(const real[:, :, ::1] x, const cnp.int64_t[:, ::1] nbr,
           const cnp.uint8_t[:, ::1] valid, int threads=1):
    cdef Py_ssize_t nb = x.shape[0], n = x.shape[1], c = x.shape[2]
    cdef Py_ssize_t m = nbr.shape[1]
    cdef Py_ssize_t b, j, mm, cc, src
    cdef real[:, :, :, ::1] out
    if real is float:
        out_np = np.zeros((nb, n, m, c), dtype=np.float32)
    else:
        out_np = np.zeros((nb, n, m, c), dtype=np.float64)
    out = out_np
    for b in range(nb):
        for j in range(n):
            for mm in range(m):
                if valid[j, mm]:
                    src = nbr[j, mm]
                    for cc in range(c):
                        out[b, j, mm, cc] = x[b, src, cc]
    return out_np


def sqka_logits(const real[:, :, ::1] q, const real[:, :, :, ::1] kctx,
                const real[:, ::1] kernels, double scale, int threads=1):
    cdef Py_ssize_t nb = q.shape[0], n = q.shape[1], c = q.shape[2]
    cdef Py_ssize_t m = kernels.shape[0], d = kernels.shape[1]
    cdef Py_ssize_t bi, b, i, j, mm, cc, dd
    cdef real r
    cdef real s = <real> scale
    cdef real[:, :, :, ::1] out
    if real is float:
        out_np = np.zeros((nb, n, n, d), dtype=np.float32)
    else:
        out_np = np.zeros((nb, n, n, d), dtype=np.float64)
    out = out_np
    for bi in prange(nb * n, num_threads=threads, nogil=True, schedule="static"):
        b = bi // n
        i = bi - b * n
        for j in range(n):
            for mm in range(m):
                r = 0
                for cc in range(c):
                    r = r + q[b, i, cc] * kctx[b, j, mm, cc]
                r = r * s
                for dd in range(d):
                    out[b, i, j, dd] += r * kernels[mm, dd]
    return out_np


def aggregate_contextual(const real[:, :, :, ::1] a, const real[:, ::1] aggr,
                         const real[:, :, :, ::1] vctx, int threads=1):
    cdef Py_ssize_t nb = a.shape[0], n = a.shape[1], d = a.shape[3]
    cdef Py_ssize_t m = aggr.shape[0], c = vctx.shape[3]
    cdef Py_ssize_t bi, b, i, j, mm, cc, dd
    cdef real k
    cdef real[:, :, ::1] out
    if real is float:
        out_np = np.zeros((nb, n, c), dtype=np.float32)
    else:
        out_np = np.zeros((nb, n, c), dtype=np.float64)
    out = out_np
    for bi in prange(nb * n, num_threads=threads, nogil=True, schedule="static"):
        b = bi // n
        i = bi - b * n
        for j in range(n):
            for mm in range(m):
                k = 0
                for dd in range(d):
                    k = k + a[b, i, j, dd] * aggr[mm, dd]
                for cc in range(c):
                    out[b, i, cc] += k * vctx[b, j, mm, cc]
    return out_np


def aggregate_scalar(const real[:, :, :, ::1] a, const real[::1] aggr,
                     const real[:, :, ::1] v, int threads=1):
    cdef Py_ssize_t nb = a.shape[0], n = a.shape[1], d = a.shape[3]
    cdef Py_ssize_t c = v.shape[2]
    cdef Py_ssize_t bi, b, i, j, cc, dd
    cdef real k
    cdef real[:, :, ::1] out
    if real is float:
        out_np = np.zeros((nb, n, c), dtype=np.float32)
    else:
        out_np = np.zeros((nb, n, c), dtype=np.float64)
    out = out_np
    for bi in prange(nb * n, num_threads=threads, nogil=True, schedule="static"):
        b = bi // n
        i = bi - b * n
        for j in range(n):
            k = 0
            for dd in range(d):
                k = k + a[b, i, j, dd] * aggr[dd]
            for cc in range(c):
                out[b, i, cc] += k * v[b, j, cc]
    return out_np


def cw_logits_naive(const real[:, :, ::1] q, const real[:, :, :, ::1] kctx,
                    const real[:, :, ::1] kernels, double scale, int threads=1):
    # Serial on purpose: this is the route that materializes the full
    # per-pair correlation map before contracting it.
    cdef Py_ssize_t nb = q.shape[0], n = q.shape[1], c = q.shape[2]
    cdef Py_ssize_t d = kernels.shape[0], m = kernels.shape[1]
    cdef Py_ssize_t b, i, j, mm, cc, dd
    cdef real acc
    cdef real s = <real> scale
    cdef long long produced = 0
    cdef real[:, :, :, ::1] out
    cdef real[:, ::1] corr
    if real is float:
        out_np = np.zeros((nb, n, n, d), dtype=np.float32)
        corr_np = np.empty((m, c), dtype=np.float32)
    else:
        out_np = np.zeros((nb, n, n, d), dtype=np.float64)
        corr_np = np.empty((m, c), dtype=np.float64)
    out = out_np
    corr = corr_np
    for b in range(nb):
        for i in range(n):
            for j in range(n):
                for mm in range(m):
                    for cc in range(c):
                        corr[mm, cc] = q[b, i, cc] * kctx[b, j, mm, cc]
                produced += m * c
                for dd in range(d):
                    acc = 0
                    for mm in range(m):
                        for cc in range(c):
                            acc = acc + corr[mm, cc] * kernels[dd, mm, cc]
                    out[b, i, j, dd] = acc * s
    return out_np, int(produced)


def cw_logits_efficient(const real[:, :, ::1] q, const real[:, :, :, ::1] kctx,
                        const real[:, :, ::1] kernels, double scale, int threads=1):
    cdef Py_ssize_t nb = q.shape[0], n = q.shape[1], c = q.shape[2]
    cdef Py_ssize_t d = kernels.shape[0], m = kernels.shape[1]
    cdef Py_ssize_t bi, bj, b, i, j, mm, cc, dd
    cdef real acc
    cdef real s = <real> scale
    cdef real[:, :, :, ::1] out
    cdef real[:, :, :, ::1] g
    if real is float:
        out_np = np.zeros((nb, n, n, d), dtype=np.float32)
        g_np = np.zeros((nb, n, d, c), dtype=np.float32)
    else:
        out_np = np.zeros((nb, n, n, d), dtype=np.float64)
        g_np = np.zeros((nb, n, d, c), dtype=np.float64)
    out = out_np
    g = g_np
    for bj in prange(nb * n, num_threads=threads, nogil=True, schedule="static"):
        b = bj // n
        j = bj - b * n
        for dd in range(d):
            for mm in range(m):
                for cc in range(c):
                    g[b, j, dd, cc] += kctx[b, j, mm, cc] * kernels[dd, mm, cc]
    for bi in prange(nb * n, num_threads=threads, nogil=True, schedule="static"):
        b = bi // n
        i = bi - b * n
        for j in range(n):
            for dd in range(d):
                acc = 0
                for cc in range(c):
                    acc = acc + q[b, i, cc] * g[b, j, dd, cc]
                out[b, i, j, dd] = acc * s
    return out_np, int(g_np.size)


def cw_aggregate_naive(const real[:, :, :, ::1] a, const real[:, :, ::1] aggr,
                       const real[:, :, :, ::1] vctx, int threads=1):
    # Builds each per-pair dynamic kernel entry before applying it.
    cdef Py_ssize_t nb = a.shape[0], n = a.shape[1], d = a.shape[3]
    cdef Py_ssize_t m = aggr.shape[1], c = aggr.shape[2]
    cdef Py_ssize_t b, i, j, mm, cc, dd
    cdef real k
    cdef real[:, :, ::1] out
    if real is float:
        out_np = np.zeros((nb, n, c), dtype=np.float32)
    else:
        out_np = np.zeros((nb, n, c), dtype=np.float64)
    out = out_np
    for b in range(nb):
        for i in range(n):
            for j in range(n):
                for mm in range(m):
                    for cc in range(c):
                        k = 0
                        for dd in range(d):
                            k = k + a[b, i, j, dd] * aggr[dd, mm, cc]
                        out[b, i, cc] += k * vctx[b, j, mm, cc]
    return out_np


def cw_aggregate_efficient(const real[:, :, :, ::1] a, const real[:, :, ::1] aggr,
                           const real[:, :, :, ::1] vctx, int threads=1):
    cdef Py_ssize_t nb = a.shape[0], n = a.shape[1], d = a.shape[3]
    cdef Py_ssize_t m = aggr.shape[1], c = aggr.shape[2]
    cdef Py_ssize_t bi, bj, b, i, j, mm, cc, dd
    cdef real acc
    cdef real[:, :, ::1] out
    cdef real[:, :, :, ::1] w
    if real is float:
        out_np = np.zeros((nb, n, c), dtype=np.float32)
        w_np = np.zeros((nb, n, d, c), dtype=np.float32)
    else:
        out_np = np.zeros((nb, n, c), dtype=np.float64)
        w_np = np.zeros((nb, n, d, c), dtype=np.float64)
    out = out_np
    w = w_np
    for bj in prange(nb * n, num_threads=threads, nogil=True, schedule="static"):
        b = bj // n
        j = bj - b * n
        for dd in range(d):
            for mm in range(m):
                for cc in range(c):
                    w[b, j, dd, cc] += aggr[dd, mm, cc] * vctx[b, j, mm, cc]
    for bi in prange(nb * n, num_threads=threads, nogil=True, schedule="static"):
        b = bi // n
        i = bi - b * n
        for j in range(n):
            for dd in range(d):
                acc = a[b, i, j, dd]
                for cc in range(c):
                    out[b, i, cc] += acc * w[b, j, dd, cc]
    return out_np
