# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels. See ``_pykernels`` for the contracts."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

BACKEND = "cython"


def topk_neighbors(queries, gallery, Py_ssize_t k, exclude):
    cdef double[:, ::1] Q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef double[:, ::1] G = np.ascontiguousarray(gallery, dtype=np.float64)
    cdef long long[::1] ex = np.ascontiguousarray(exclude, dtype=np.int64)
    cdef Py_ssize_t nq = Q.shape[0], ng = G.shape[0], dim = Q.shape[1]
    if G.shape[1] != dim:
        raise ValueError("query and gallery dimensions differ")
    if k < 1 or k > ng:
        raise ValueError("k out of range")
    out_idx_arr = np.empty((nq, k), dtype=np.int64)
    out_d2_arr = np.empty((nq, k), dtype=np.float64)
    cdef long long[:, ::1] out_idx = out_idx_arr
    cdef double[:, ::1] out_d2 = out_d2_arr
    cdef Py_ssize_t q, i, j, pos, filled
    cdef double d2, t
    with nogil:
        for q in range(nq):
            filled = 0
            for i in range(ng):
                if i == ex[q]:
                    continue
                d2 = 0.0
                for j in range(dim):
                    t = G[i, j] - Q[q, j]
                    d2 = d2 + t * t
                if filled == k and d2 >= out_d2[q, k - 1]:
                    continue
                # insertion keeps earlier gallery rows ahead on ties
                if filled < k:
                    pos = filled
                    filled = filled + 1
                else:
                    pos = k - 1
                while pos > 0 and out_d2[q, pos - 1] > d2:
                    out_d2[q, pos] = out_d2[q, pos - 1]
                    out_idx[q, pos] = out_idx[q, pos - 1]
                    pos = pos - 1
                out_d2[q, pos] = d2
                out_idx[q, pos] = i
            for pos in range(filled, k):
                out_d2[q, pos] = INFINITY
                out_idx[q, pos] = -1
    return out_idx_arr, np.sqrt(out_d2_arr)


def triplet_hinge(emb, a, p, n, margin):
    cdef double[:, ::1] U = np.ascontiguousarray(emb, dtype=np.float64)
    cdef long long[::1] A = np.ascontiguousarray(a, dtype=np.int64)
    cdef long long[::1] P = np.ascontiguousarray(p, dtype=np.int64)
    cdef long long[::1] N = np.ascontiguousarray(n, dtype=np.int64)
    cdef double[::1] M = np.ascontiguousarray(margin, dtype=np.float64)
    cdef Py_ssize_t nt = A.shape[0], dim = U.shape[1], t, j
    grad_arr = np.zeros((U.shape[0], dim), dtype=np.float64)
    cdef double[:, ::1] G = grad_arr
    cdef double loss = 0.0, dap, dan, h, x, y
    cdef long long ia, ip, ineg
    cdef Py_ssize_t active = 0
    with nogil:
        for t in range(nt):
            ia = A[t]
            ip = P[t]
            ineg = N[t]
            dap = 0.0
            dan = 0.0
            for j in range(dim):
                x = U[ia, j] - U[ip, j]
                y = U[ia, j] - U[ineg, j]
                dap = dap + x * x
                dan = dan + y * y
            h = dap - dan + M[t]
            if h <= 0.0:
                continue
            loss = loss + h
            active = active + 1
            for j in range(dim):
                x = 2.0 * (U[ia, j] - U[ip, j])
                y = 2.0 * (U[ia, j] - U[ineg, j])
                G[ia, j] = G[ia, j] + x - y
                G[ip, j] = G[ip, j] - x
                G[ineg, j] = G[ineg, j] + y
    return loss, grad_arr, active
