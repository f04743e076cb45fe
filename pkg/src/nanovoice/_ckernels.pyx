# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled adapter hot kernels; same contract as ``_kernels_py``.

Each kernel is one fused pass per speaker instead of a chain of temporaries.
"""

import numpy as np
from libc.math cimport sqrt

NAME = "compiled"


def column_norms(const double[:, :, ::1] v):
    cdef Py_ssize_t n = v.shape[0], d = v.shape[1], k = v.shape[2]
    cdef Py_ssize_t s, i, j
    out_arr = np.zeros((n, k))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for s in range(n):
            for i in range(d):
                for j in range(k):
                    out[s, j] += v[s, i, j] * v[s, i, j]
            for j in range(k):
                out[s, j] = sqrt(out[s, j])
    return out_arr


def merge_forward(const double[:, ::1] w0, const double[:, :, ::1] b, const double[:, :, ::1] a, m,
                  double alpha, Py_ssize_t n, bint normalize):
    cdef Py_ssize_t d = w0.shape[0], k = w0.shape[1], r = b.shape[2]
    cdef Py_ssize_t nb = b.shape[0], na = a.shape[0]
    cdef Py_ssize_t s, i, j, q, sb, sa
    cdef double bq, x
    cdef bint has_m = m is not None
    cdef const double[:, ::1] mv
    v_arr = np.empty((n, d, k))
    cdef double[:, :, ::1] v = v_arr
    norms_arr = np.zeros((n, k))
    cdef double[:, ::1] sq = norms_arr
    w_arr = v_arr
    cdef double[:, :, ::1] w
    if has_m:
        mv = m
        w_arr = np.empty((n, d, k))
        w = w_arr
    with nogil:
        for s in range(n):
            sb = s if nb > 1 else 0
            sa = s if na > 1 else 0
            # one row of V at a time, accumulating squared column norms on the way
            for i in range(d):
                for j in range(k):
                    v[s, i, j] = w0[i, j]
                for q in range(r):
                    bq = alpha * b[sb, i, q]
                    for j in range(k):
                        v[s, i, j] += bq * a[sa, q, j]
                if normalize:
                    for j in range(k):
                        x = v[s, i, j]
                        sq[s, j] += x * x
            if not has_m:
                continue
            if normalize:
                for j in range(k):
                    sq[s, j] = sqrt(sq[s, j])
                # scale = m/||v|| first so that m == ||v|| gives exactly 1.0
                for i in range(d):
                    for j in range(k):
                        w[s, i, j] = v[s, i, j] * (mv[s, j] / sq[s, j])
            else:
                for i in range(d):
                    for j in range(k):
                        w[s, i, j] = v[s, i, j] * mv[s, j]
    if not has_m:
        return v_arr, v_arr, None
    return w_arr, v_arr, (norms_arr if normalize else None)


def merge_backward(const double[:, :, ::1] g, const double[:, :, ::1] v, norms,
                   const double[:, :, ::1] b, const double[:, :, ::1] a, m, double alpha, bint normalize, bint detach,
                   bint need_db):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], k = g.shape[2], r = b.shape[2]
    cdef Py_ssize_t nb = b.shape[0], na = a.shape[0]
    cdef Py_ssize_t s, i, j, q, sb, sa
    cdef double acc, bq
    cdef bint has_m = m is not None
    cdef const double[:, ::1] mv, nv
    cdef double[:, ::1] dmv
    dv_arr = np.empty((d, k))
    cdef double[:, ::1] dv = dv_arr
    tmp_arr = np.empty((r, k))
    cdef double[:, ::1] tmp = tmp_arr
    inv_arr = np.empty(k)
    cdef double[::1] inv = inv_arr
    da_arr = np.zeros((na, r, k))
    cdef double[:, :, ::1] da = da_arr
    db_arr = np.zeros((nb, d, r)) if need_db else None
    cdef double[:, :, ::1] db
    if need_db:
        db = db_arr
    dm_arr = None
    if has_m:
        mv = m
        dm_arr = np.zeros((n, k))
        dmv = dm_arr
    if normalize:
        nv = norms
    for s in range(n):
        sb = s if nb > 1 else 0
        sa = s if na > 1 else 0
        with nogil:
            if not has_m:
                for i in range(d):
                    for j in range(k):
                        dv[i, j] = g[s, i, j]
            elif normalize:
                for j in range(k):
                    inv[j] = 1.0 / nv[s, j]
                for i in range(d):
                    for j in range(k):
                        dmv[s, j] += g[s, i, j] * (v[s, i, j] * inv[j])
                for i in range(d):
                    for j in range(k):
                        if detach:
                            dv[i, j] = (mv[s, j] * inv[j]) * g[s, i, j]
                        else:
                            dv[i, j] = (mv[s, j] * inv[j]) * (g[s, i, j] - dmv[s, j] * (v[s, i, j] * inv[j]))
            else:
                for i in range(d):
                    for j in range(k):
                        dmv[s, j] += g[s, i, j] * v[s, i, j]
                        dv[i, j] = mv[s, j] * g[s, i, j]
            for q in range(r):
                for j in range(k):
                    tmp[q, j] = 0.0
            for i in range(d):
                for q in range(r):
                    bq = b[sb, i, q]
                    for j in range(k):
                        tmp[q, j] += bq * dv[i, j]
            for q in range(r):
                for j in range(k):
                    da[sa, q, j] += alpha * tmp[q, j]
            if need_db:
                for i in range(d):
                    for q in range(r):
                        acc = 0.0
                        for j in range(k):
                            acc += dv[i, j] * a[sa, q, j]
                        db[sb, i, q] += alpha * acc
    return db_arr, da_arr, dm_arr
