# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused Cython implementation of the row-wise kernel surface.

Same contract as ``pyref``; each kernel walks every row once per stage with
no intermediate arrays. Reductions run left to right within a row.
"""

from libc.math cimport exp, log

import numpy as np


def log_softmax(z, double tau):
    cdef double[:, ::1] zv = z
    cdef Py_ssize_t n = zv.shape[0], v = zv.shape[1]
    out = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double m, s, x
    for i in range(n):
        m = zv[i, 0] / tau
        for j in range(1, v):
            x = zv[i, j] / tau
            if x > m:
                m = x
        s = 0.0
        for j in range(v):
            x = zv[i, j] / tau - m
            o[i, j] = x
            s += exp(x)
        s = log(s)
        for j in range(v):
            o[i, j] -= s
    return out


def log_softmax_grad(logp, gout, double tau):
    cdef double[:, ::1] lp = logp
    cdef double[:, ::1] g = gout
    cdef Py_ssize_t n = lp.shape[0], v = lp.shape[1]
    out = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double gsum
    for i in range(n):
        gsum = 0.0
        for j in range(v):
            gsum += g[i, j]
        for j in range(v):
            o[i, j] = (g[i, j] - exp(lp[i, j]) * gsum) / tau
    return out


def softmax(z, double tau):
    cdef double[:, ::1] zv = z
    cdef Py_ssize_t n = zv.shape[0], v = zv.shape[1]
    out = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double m, s, x
    for i in range(n):
        m = zv[i, 0] / tau
        for j in range(1, v):
            x = zv[i, j] / tau
            if x > m:
                m = x
        s = 0.0
        for j in range(v):
            x = exp(zv[i, j] / tau - m)
            o[i, j] = x
            s += x
        for j in range(v):
            o[i, j] /= s
    return out


def softmax_grad(p, gout, double tau):
    cdef double[:, ::1] pv = p
    cdef double[:, ::1] g = gout
    cdef Py_ssize_t n = pv.shape[0], v = pv.shape[1]
    out = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(v):
            dot += g[i, j] * pv[i, j]
        for j in range(v):
            o[i, j] = pv[i, j] * (g[i, j] - dot) / tau
    return out


def row_entropy(p):
    cdef double[:, ::1] pv = p
    cdef Py_ssize_t n = pv.shape[0], v = pv.shape[1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double h, x
    for i in range(n):
        h = 0.0
        for j in range(v):
            x = pv[i, j]
            if x > 0.0:
                h -= x * log(x)
        o[i] = h
    return out
