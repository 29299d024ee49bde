# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fmax, fmin

cnp.import_array()


def hard_concrete_gate(const double[::1] log_alpha, const double[::1] u,
                       double beta, double gamma, double zeta):
    # transcendental part stays vectorised in numpy; clamp and slope are fused here
    s_arr = 0.5 * (1.0 + np.tanh(0.5 * ((np.log(u) - np.log1p(np.negative(u))
                                          + np.asarray(log_alpha)) / beta)))
    cdef const double[::1] s = s_arr
    cdef Py_ssize_t n = s.shape[0], i
    z_arr = np.empty(n, dtype=np.float64)
    dz_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] z = z_arr
    cdef double[::1] dz = dz_arr
    cdef double sbar, inside, span = zeta - gamma
    with nogil:
        for i in range(n):
            sbar = s[i] * span + gamma
            inside = (sbar > 0.0) * (sbar < 1.0)
            z[i] = fmin(fmax(sbar, 0.0), 1.0)
            dz[i] = inside * span * s[i] * (1.0 - s[i]) / beta
    return z_arr, dz_arr


def deterministic_gate(const double[::1] log_alpha, double gamma, double zeta):
    s_arr = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(log_alpha)))
    cdef const double[::1] s = s_arr
    cdef Py_ssize_t n = s.shape[0], i
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = fmin(fmax(s[i] * (zeta - gamma) + gamma, 0.0), 1.0)
    return out_arr


def merge_forward(const double[::1] theta_pre, const double[::1] delta,
                  const double[::1] alpha, const double[:, ::1] gates):
    cdef Py_ssize_t m_count = gates.shape[0], n = gates.shape[1], i, m
    out_arr = np.empty(n, dtype=np.float64)
    w_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] w = w_arr
    cdef double a
    with nogil:
        for m in range(m_count):
            a = alpha[m]
            if a == 0.0:
                continue
            for i in range(n):
                w[i] += a * gates[m, i]
        for i in range(n):
            out[i] = theta_pre[i] + delta[i] * w[i]
    return out_arr, w_arr


def merge_backward(const double[::1] g, const double[::1] delta,
                   const double[::1] alpha, const double[:, ::1] gates,
                   const double[::1] w):
    cdef Py_ssize_t m_count = gates.shape[0], n = gates.shape[1], i, m
    gdelta_arr = np.empty(n, dtype=np.float64)
    galpha_arr = np.zeros(m_count, dtype=np.float64)
    ggates_arr = np.empty((m_count, n), dtype=np.float64)
    cdef double[::1] gdelta = gdelta_arr
    cdef double[::1] galpha = galpha_arr
    cdef double[:, ::1] ggates = ggates_arr
    cdef double gd, acc
    with nogil:
        for i in range(n):
            gdelta[i] = g[i] * w[i]
        for m in range(m_count):
            acc = 0.0
            for i in range(n):
                gd = g[i] * delta[i]
                acc += gates[m, i] * gd
                ggates[m, i] = alpha[m] * gd
            galpha[m] = acc
    return gdelta_arr, galpha_arr, ggates_arr


def pairwise_sqdist(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], k = b.shape[0], d = a.shape[1], i, j, t
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double acc, diff
    with nogil:
        for i in range(n):
            for j in range(k):
                acc = 0.0
                for t in range(d):
                    diff = a[i, t] - b[j, t]
                    acc += diff * diff
                out[i, j] = acc
    return out_arr


def support_counts(const double[::1] a, const double[::1] b):
    cdef Py_ssize_t n = a.shape[0], i
    cdef long joint = 0, either = 0
    cdef int na, nb
    with nogil:
        for i in range(n):
            na = a[i] != 0.0
            nb = b[i] != 0.0
            joint += na & nb
            either += na | nb
    return int(joint), int(either)
