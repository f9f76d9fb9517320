"""Numba-compiled GP kernels.

Loop implementations of the same operations as :mod:`gpmhe._kernels_numpy`;
compiled lazily with on-disk caching.  Importing this module raises
ImportError when numba is unavailable, which :mod:`gpmhe.backend` turns into
a fallback to the numpy path.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def cross_cov(a, x, sf2, inv_len2):
    m, nd = a.shape
    n = x.shape[0]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for d in range(nd):
                diff = a[i, d] - x[j, d]
                s += diff * diff * inv_len2[d]
            out[i, j] = sf2 * np.exp(-0.5 * s)
    return out


@njit(cache=True)
def gram(x, sf2, inv_len2, eps2):
    n, nd = x.shape
    out = np.empty((n, n))
    for i in range(n):
        out[i, i] = sf2 + eps2
        for j in range(i + 1, n):
            s = 0.0
            for d in range(nd):
                diff = x[i, d] - x[j, d]
                s += diff * diff * inv_len2[d]
            v = sf2 * np.exp(-0.5 * s)
            out[i, j] = v
            out[j, i] = v
    return out


@njit(cache=True)
def mean_batch(a, x, alpha, sf2, inv_len2):
    m, nd = a.shape
    n = x.shape[0]
    out = np.empty(m)
    for i in range(m):
        acc = 0.0
        for j in range(n):
            s = 0.0
            for d in range(nd):
                diff = a[i, d] - x[j, d]
                s += diff * diff * inv_len2[d]
            acc += alpha[j] * sf2 * np.exp(-0.5 * s)
        out[i] = acc
    return out


@njit(cache=True)
def mean_grad_batch(a, x, alpha, sf2, inv_len2):
    m, nd = a.shape
    n = x.shape[0]
    out = np.zeros((m, nd))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for d in range(nd):
                diff = a[i, d] - x[j, d]
                s += diff * diff * inv_len2[d]
            k = alpha[j] * sf2 * np.exp(-0.5 * s)
            for d in range(nd):
                out[i, d] += k * inv_len2[d] * (x[j, d] - a[i, d])
    return out


@njit(cache=True)
def var_batch(a, x, chol_lower, sf2, inv_len2, eps2):
    m, nd = a.shape
    n = x.shape[0]
    out = np.empty(m)
    kvec = np.empty(n)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for d in range(nd):
                diff = a[i, d] - x[j, d]
                s += diff * diff * inv_len2[d]
            kvec[j] = sf2 * np.exp(-0.5 * s)
        # forward substitution: v = L^-1 kvec, accumulating ||v||^2
        acc = 0.0
        for j in range(n):
            s = kvec[j]
            for l in range(j):
                s -= chol_lower[j, l] * kvec[l]
            s /= chol_lower[j, j]
            kvec[j] = s
            acc += s * s
        out[i] = (sf2 + eps2) - acc
    return out
