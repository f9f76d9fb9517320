"""Kernel backend selection.

The hot GP operations (Gram matrix, cross-covariance, batched posterior
mean/variance/gradient) exist twice: numba-compiled loops and a pure-numpy
fallback.  The environment variable ``GPMHE_BACKEND`` picks the path:

* ``auto`` (default) - numba when importable, numpy otherwise
* ``numba``          - require numba, error if missing
* ``numpy``          - force the pure-numpy fallback

``benchmarks/bench_backends.py`` compares the two paths head to head.
"""

from __future__ import annotations

import os

from .errors import ConfigurationError

_ENV_VAR = "GPMHE_BACKEND"
_requested = os.environ.get(_ENV_VAR, "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ConfigurationError(
        f"{_ENV_VAR} must be one of 'auto', 'numba', 'numpy', got {_requested!r}"
    )

if _requested in ("auto", "numba"):
    try:
        from . import _kernels_numba as _impl

        BACKEND_NAME = "numba"
    except ImportError:
        if _requested == "numba":
            raise ConfigurationError(
                f"{_ENV_VAR}=numba requested but numba is not importable"
            ) from None
        from . import _kernels_numpy as _impl

        BACKEND_NAME = "numpy"
else:
    from . import _kernels_numpy as _impl

    BACKEND_NAME = "numpy"

cross_cov = _impl.cross_cov
gram = _impl.gram
mean_batch = _impl.mean_batch
mean_grad_batch = _impl.mean_grad_batch
var_batch = _impl.var_batch


def backend_name() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return BACKEND_NAME
