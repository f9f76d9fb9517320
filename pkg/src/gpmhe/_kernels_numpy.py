"""Vectorized numpy implementations of the hot GP kernels.

Fallback path for :mod:`gpmhe.backend`; semantics identical to the numba
implementations in :mod:`gpmhe._kernels_numba` (results agree to round-off,
summation order may differ).

All inputs are float64 arrays; ``inv_len2`` holds the per-dimension inverse
squared lengthscales 1/phi_d**2.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular


def _sqdist(a: np.ndarray, x: np.ndarray, inv_len2: np.ndarray) -> np.ndarray:
    """Pairwise scaled squared distances, shape (len(a), len(x))."""
    diff = a[:, None, :] - x[None, :, :]
    return np.einsum("mnd,d->mn", diff * diff, inv_len2)


def cross_cov(a, x, sf2, inv_len2):
    """Noise-free cross-covariance matrix k(a, x), shape (M, N)."""
    return sf2 * np.exp(-0.5 * _sqdist(a, x, inv_len2))


def gram(x, sf2, inv_len2, eps2):
    """Gram matrix k(x, x) + eps2 * I (noise on the diagonal only)."""
    k = cross_cov(x, x, sf2, inv_len2)
    k[np.diag_indices_from(k)] += eps2
    return k


def mean_batch(a, x, alpha, sf2, inv_len2):
    """Posterior means k(a, x) @ alpha, shape (M,)."""
    return cross_cov(a, x, sf2, inv_len2) @ alpha


def mean_grad_batch(a, x, alpha, sf2, inv_len2):
    """Gradients of the posterior mean w.r.t. each test input, shape (M, nd)."""
    kc = cross_cov(a, x, sf2, inv_len2)
    mean = kc @ alpha
    grad = (kc * alpha) @ x - mean[:, None] * a
    return grad * inv_len2[None, :]


def var_batch(a, x, chol_lower, sf2, inv_len2, eps2):
    """Posterior variances sf2 + eps2 - ||L^-1 k(x, a)||^2, shape (M,)."""
    if a.shape[0] == 0:
        return np.empty(0)
    kc = cross_cov(a, x, sf2, inv_len2)
    v = solve_triangular(chol_lower, kc.T, lower=True, check_finite=False)
    return (sf2 + eps2) - np.einsum("nm,nm->m", v, v)
