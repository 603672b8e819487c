# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled selection kernels. Same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


cdef inline double _clip(double x) nogil:
    if x > 1.0:
        return 1.0
    if x < -1.0:
        return -1.0
    return x


def cosine_matrix(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], k = B.shape[0], f = A.shape[1]
    cdef Py_ssize_t i, j, d
    out_arr = np.zeros((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] nb = np.empty(k, dtype=np.float64)
    cdef double s, na, dot
    with nogil:
        for j in range(k):
            s = 0.0
            for d in range(f):
                s = s + B[j, d] * B[j, d]
            nb[j] = sqrt(s)
        for i in range(n):
            s = 0.0
            for d in range(f):
                s = s + A[i, d] * A[i, d]
            na = sqrt(s)
            if na == 0.0:
                continue
            for j in range(k):
                if nb[j] == 0.0:
                    continue
                dot = 0.0
                for d in range(f):
                    dot = dot + A[i, d] * B[j, d]
                out[i, j] = _clip(dot / (na * nb[j]))
    return out_arr


def score_matrix(features, old_protos, new_protos, double beta, double gamma):
    cdef double[:, ::1] so = cosine_matrix(features, old_protos)
    cdef Py_ssize_t n = so.shape[0], c_old = so.shape[1]
    cdef Py_ssize_t c_new = new_protos.shape[0]
    cdef double[:, ::1] sn
    cdef double[::1] new_mean = np.zeros(n, dtype=np.float64)
    cdef Py_ssize_t i, m, l
    cdef double total, acc
    if c_new > 0 and gamma != 0.0:
        sn = cosine_matrix(features, new_protos)
        for i in range(n):
            acc = 0.0
            for l in range(c_new):
                acc = acc + sn[i, l]
            new_mean[i] = acc / c_new
    out_arr = np.empty((n, c_old), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            total = 0.0
            for m in range(c_old):
                total = total + so[i, m]
            for m in range(c_old):
                acc = -so[i, m]
                if c_old > 1 and beta != 0.0:
                    acc = acc + beta * ((total - so[i, m]) / (c_old - 1))
                if c_new > 0 and gamma != 0.0:
                    acc = acc + gamma * new_mean[i]
                out[i, m] = acc
    return out_arr


def greedy_select(scores, Py_ssize_t k, ids):
    cdef double[:, ::1] S = np.ascontiguousarray(scores, dtype=np.float64)
    cdef long long[::1] I = np.ascontiguousarray(ids, dtype=np.int64)
    cdef Py_ssize_t n = S.shape[0], c = S.shape[1]
    if n < c * k:
        raise ValueError(f"need {c * k} candidates, have {n}")
    out_arr = np.empty((c, k), dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    cdef unsigned char[::1] taken = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t m, t, i, best
    cdef double bs
    with nogil:
        for m in range(c):
            for t in range(k):
                best = -1
                bs = INFINITY
                for i in range(n):
                    if taken[i]:
                        continue
                    if best < 0 or S[i, m] < bs or (S[i, m] == bs and I[i] < I[best]):
                        best = i
                        bs = S[i, m]
                taken[best] = 1
                out[m, t] = best
    return out_arr


def herding_order(features, Py_ssize_t k):
    cdef double[:, ::1] X = np.ascontiguousarray(features, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], f = X.shape[1]
    if k > n:
        k = n
    cdef double[::1] target = np.ascontiguousarray(np.asarray(X).mean(axis=0))
    cdef double[::1] running = np.zeros(f, dtype=np.float64)
    cdef unsigned char[::1] taken = np.zeros(n, dtype=np.uint8)
    out_arr = np.empty(k, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t t, i, d, best
    cdef double bd, dist, diff
    with nogil:
        for t in range(k):
            best = -1
            bd = INFINITY
            for i in range(n):
                if taken[i]:
                    continue
                dist = 0.0
                for d in range(f):
                    diff = (running[d] + X[i, d]) / (t + 1) - target[d]
                    dist = dist + diff * diff
                if best < 0 or dist < bd:
                    best = i
                    bd = dist
            taken[best] = 1
            out[t] = best
            for d in range(f):
                running[d] = running[d] + X[best, d]
    return out_arr
