# cython: language_level=3
"""Compiled lattice kernels; drop-in replacement for ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()

NAME = "cython"


cdef inline double _lse2(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log(1.0 + exp(b - a))
    return b + log(1.0 + exp(a - b))


def forward(const double[:, ::1] em, const double[:, ::1] trans):
    cdef Py_ssize_t n = em.shape[0], L = em.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double m, s, v
    alpha_arr = np.empty((n, L), dtype=np.float64)
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[::1] buf = np.empty(L, dtype=np.float64)
    with nogil:
        for k in range(L):
            alpha[0, k] = trans[L, k] + em[0, k]
        for i in range(1, n):
            for k in range(L):
                if em[i, k] == -INFINITY:
                    alpha[i, k] = -INFINITY
                    continue
                m = -INFINITY
                for j in range(L):
                    v = alpha[i - 1, j] + trans[j, k]
                    buf[j] = v
                    if v > m:
                        m = v
                if m == -INFINITY:
                    alpha[i, k] = -INFINITY
                    continue
                s = 0.0
                for j in range(L):
                    s += exp(buf[j] - m)
                alpha[i, k] = em[i, k] + m + log(s)
        m = -INFINITY
        for k in range(L):
            v = alpha[n - 1, k] + trans[k, L + 1]
            buf[k] = v
            if v > m:
                m = v
        if m == -INFINITY:
            s = -INFINITY
        else:
            s = 0.0
            for k in range(L):
                s += exp(buf[k] - m)
            s = m + log(s)
    return alpha_arr, s


def backward(const double[:, ::1] em, const double[:, ::1] trans):
    cdef Py_ssize_t n = em.shape[0], L = em.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double m, s, v
    beta_arr = np.empty((n, L), dtype=np.float64)
    cdef double[:, ::1] beta = beta_arr
    cdef double[::1] buf = np.empty(L, dtype=np.float64)
    with nogil:
        for k in range(L):
            beta[n - 1, k] = trans[k, L + 1]
        for i in range(n - 2, -1, -1):
            for j in range(L):
                m = -INFINITY
                for k in range(L):
                    v = trans[j, k] + em[i + 1, k] + beta[i + 1, k]
                    buf[k] = v
                    if v > m:
                        m = v
                if m == -INFINITY:
                    beta[i, j] = -INFINITY
                    continue
                s = 0.0
                for k in range(L):
                    s += exp(buf[k] - m)
                beta[i, j] = m + log(s)
    return beta_arr


def transition_expectations(const double[:, ::1] em, const double[:, ::1] trans,
                            const double[:, ::1] alpha, const double[:, ::1] beta,
                            double log_z):
    cdef Py_ssize_t n = em.shape[0], L = em.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double v, a
    out_arr = np.zeros((L + 2, L + 2), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for k in range(L):
            v = alpha[0, k] + beta[0, k] - log_z
            if v > -INFINITY:
                out[L, k] = exp(v)
            v = alpha[n - 1, k] + beta[n - 1, k] - log_z
            if v > -INFINITY:
                out[k, L + 1] = exp(v)
        for i in range(1, n):
            for j in range(L):
                a = alpha[i - 1, j]
                if a == -INFINITY:
                    continue
                for k in range(L):
                    v = a + trans[j, k] + em[i, k] + beta[i, k] - log_z
                    if v > -INFINITY:
                        out[j, k] += exp(v)
    return out_arr


def viterbi(const double[:, ::1] em, const double[:, ::1] trans):
    cdef Py_ssize_t n = em.shape[0], L = em.shape[1]
    cdef Py_ssize_t i, j, k, best_j
    cdef double best, v
    back_arr = np.zeros((n, L), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] back = back_arr
    cdef double[::1] delta = np.empty(L, dtype=np.float64)
    cdef double[::1] nxt = np.empty(L, dtype=np.float64)
    path_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] path = path_arr
    with nogil:
        for k in range(L):
            delta[k] = trans[L, k] + em[0, k]
        for i in range(1, n):
            for k in range(L):
                best = delta[0] + trans[0, k]
                best_j = 0
                for j in range(1, L):
                    v = delta[j] + trans[j, k]
                    if v > best:
                        best = v
                        best_j = j
                back[i, k] = best_j
                nxt[k] = best + em[i, k]
            for k in range(L):
                delta[k] = nxt[k]
        best = delta[0] + trans[0, L + 1]
        best_j = 0
        for k in range(1, L):
            v = delta[k] + trans[k, L + 1]
            if v > best:
                best = v
                best_j = k
        path[n - 1] = best_j
        for i in range(n - 1, 0, -1):
            path[i - 1] = back[i, path[i]]
    return path_arr, best
