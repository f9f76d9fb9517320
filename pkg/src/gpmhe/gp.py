"""Exact Gaussian-process regression for a single scalar output.

Squared-exponential ARD kernel with signal std ``sigma_f``, per-dimension
lengthscales and observation-noise std ``sigma_eps``.  Conditioning is exact
via a Cholesky factorization of K + sigma_eps^2 I; noise enters the Gram
diagonal exactly once, cross-covariances are noise-free, and the test-point
prior variance is sigma_f^2 + sigma_eps^2 so the far-field posterior variance
attains that value.

Hyperparameters are tuned by multi-start backtracking gradient ascent on the
log marginal likelihood in log-parameter space.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky

from . import backend
from .errors import ContractViolationError, NumericalError
from .rng import stream

LOG_2PI = math.log(2.0 * math.pi)

# Jitter policy: on Cholesky failure add 1e-10 * sigma_f^2 to the diagonal,
# escalate by x10 up to 1e-4 * sigma_f^2, then give up.
JITTER_START_REL = 1e-10
JITTER_MAX_REL = 1e-4

# Posterior variances in [-1e-10, 0] are round-off and are clamped to zero;
# anything below the threshold indicates a bug and raises.
VAR_CLAMP_THRESHOLD = -1e-10


@dataclass(frozen=True)
class Hyperparameters:
    """Kernel parameters: signal std, per-dimension lengthscales, noise std."""

    sigma_f: float
    lengthscales: np.ndarray
    sigma_eps: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "sigma_f", float(self.sigma_f))
        object.__setattr__(self, "sigma_eps", float(self.sigma_eps))
        if self.sigma_f < 0 or self.sigma_eps < 0:
            raise ContractViolationError("sigma_f and sigma_eps must be >= 0")
        if ls.ndim != 1 or ls.size == 0 or not np.all(ls > 0):
            raise ContractViolationError("lengthscales must be strictly positive")

    @property
    def n_dims(self) -> int:
        return self.lengthscales.size

    def to_dict(self) -> dict:
        return {
            "sigma_f": self.sigma_f,
            "lengthscales": [float(v) for v in self.lengthscales],
            "sigma_eps": self.sigma_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        return cls(d["sigma_f"], np.asarray(d["lengthscales"], dtype=float), d["sigma_eps"])

    def as_log_vector(self) -> np.ndarray:
        """Pack as (log sigma_f, log phi_1..phi_nd, log sigma_eps)."""
        return np.log(np.concatenate(([self.sigma_f], self.lengthscales, [self.sigma_eps])))

    @classmethod
    def from_log_vector(cls, theta: np.ndarray) -> "Hyperparameters":
        v = np.exp(np.asarray(theta, dtype=float))
        return cls(v[0], v[1:-1], v[-1])


@dataclass(frozen=True)
class Dataset:
    """Regression training data: N input vectors of dim n_d and N scalar targets."""

    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(self.inputs, dtype=float)))
        y = np.ascontiguousarray(np.asarray(self.outputs, dtype=float).ravel())
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)
        if x.shape[0] != y.shape[0]:
            raise ContractViolationError(
                f"inputs ({x.shape[0]}) and outputs ({y.shape[0]}) must have equal count"
            )
        if x.shape[0] < 1:
            raise ContractViolationError("dataset must contain at least one sample")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ContractViolationError("dataset entries must be finite")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_dims(self) -> int:
        return self.inputs.shape[1]

    def to_csv(self) -> str:
        """Serialize as CSV with header d_1..d_nd, y."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"d_{i + 1}" for i in range(self.n_dims)] + ["y"])
        for row, y in zip(self.inputs, self.outputs):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(y))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise ContractViolationError("dataset CSV is empty") from None
        if not header or header[-1] != "y" or not all(
            c == f"d_{i + 1}" for i, c in enumerate(header[:-1])
        ):
            raise ContractViolationError(f"unexpected dataset CSV header: {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ContractViolationError(
                    f"dataset CSV row {lineno} has {len(row)} fields, expected {len(header)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ContractViolationError(f"dataset CSV row {lineno}: {exc}") from None
        data = np.asarray(rows, dtype=float)
        return cls(data[:, :-1], data[:, -1])


@dataclass(frozen=True)
class TrainedGp:
    """A GP conditioned on a dataset: Cholesky factor of K + sigma_eps^2 I and
    the precomputed weight vector alpha = (K + sigma_eps^2 I)^-1 y.

    Immutable; posterior queries are safe for concurrent readers."""

    dataset: Dataset
    hyper: Hyperparameters
    chol: np.ndarray
    weights: np.ndarray
    jitter: float = 0.0

    @property
    def n_dims(self) -> int:
        return self.dataset.n_dims


def _check_dims(hyper: Hyperparameters, d: np.ndarray, what: str) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.shape[-1] != hyper.n_dims:
        raise ContractViolationError(
            f"{what}: input dim {d.shape[-1]} does not match lengthscale count {hyper.n_dims}"
        )
    if not np.all(np.isfinite(d)):
        raise ContractViolationError(f"{what}: input entries must be finite")
    return d


def kernel_eval(d1: np.ndarray, d2: np.ndarray, hyper: Hyperparameters) -> float:
    """Squared-exponential ARD kernel value (no noise term)."""
    d1 = _check_dims(hyper, np.ravel(d1), "kernel_eval")
    d2 = _check_dims(hyper, np.ravel(d2), "kernel_eval")
    diff = (d1 - d2) / hyper.lengthscales
    return float(hyper.sigma_f**2 * math.exp(-0.5 * float(diff @ diff)))


def _gram_with_jitter(ds: Dataset, hyper: Hyperparameters):
    """Gram matrix K + sigma_eps^2 I with escalating diagonal jitter until the
    Cholesky factorization succeeds.  Returns (gram, chol_lower, jitter)."""
    sf2 = hyper.sigma_f**2
    inv_len2 = np.ascontiguousarray(1.0 / hyper.lengthscales**2)
    k = np.asarray(backend.gram(ds.inputs, sf2, inv_len2, hyper.sigma_eps**2))
    jitter = 0.0
    attempt = k
    while True:
        try:
            chol = cholesky(attempt, lower=True, check_finite=False)
            return attempt, chol, jitter
        except np.linalg.LinAlgError:
            pass
        jitter = JITTER_START_REL * sf2 if jitter == 0.0 else jitter * 10.0
        if jitter > JITTER_MAX_REL * sf2 or jitter == 0.0:
            eigs = np.linalg.eigvalsh(k)
            raise NumericalError(
                "Gram matrix is not positive definite after jitter escalation "
                f"(N={ds.n_samples}, sigma_f={hyper.sigma_f:g}, "
                f"sigma_eps={hyper.sigma_eps:g}, eig range [{eigs[0]:.3e}, {eigs[-1]:.3e}])"
            )
        attempt = k + jitter * np.eye(ds.n_samples)


def gram_matrix(ds: Dataset, hyper: Hyperparameters) -> np.ndarray:
    """Gram matrix K(D, D) + sigma_eps^2 I, jittered if needed to be PD."""
    g, _, _ = _gram_with_jitter(ds, hyper)
    return g


def fit(ds: Dataset, hyper: Hyperparameters) -> TrainedGp:
    """Condition a GP on the dataset; factors the Gram matrix once."""
    if ds.n_dims != hyper.n_dims:
        raise ContractViolationError(
            f"dataset dim {ds.n_dims} does not match lengthscale count {hyper.n_dims}"
        )
    _, chol, jitter = _gram_with_jitter(ds, hyper)
    weights = cho_solve((chol, True), ds.outputs, check_finite=False)
    return TrainedGp(ds, hyper, chol, weights, jitter)


def _query_arrays(gp: TrainedGp, d_star: np.ndarray, what: str):
    d = _check_dims(gp.hyper, np.atleast_2d(np.asarray(d_star, dtype=float)), what)
    return (
        np.ascontiguousarray(d),
        gp.hyper.sigma_f**2,
        np.ascontiguousarray(1.0 / gp.hyper.lengthscales**2),
    )


def posterior_mean_batch(gp: TrainedGp, d_star: np.ndarray) -> np.ndarray:
    """Posterior means at a batch of test inputs, shape (M,)."""
    d, sf2, inv_len2 = _query_arrays(gp, d_star, "posterior_mean")
    return np.asarray(backend.mean_batch(d, gp.dataset.inputs, gp.weights, sf2, inv_len2))


def posterior_mean(gp: TrainedGp, d_star: np.ndarray) -> float:
    """Posterior mean k(d*, D) @ alpha at a single test input."""
    return float(posterior_mean_batch(gp, np.ravel(d_star)[None, :])[0])


def posterior_var_batch(gp: TrainedGp, d_star: np.ndarray) -> np.ndarray:
    """Posterior variances at a batch of test inputs, clamped at zero."""
    d, sf2, inv_len2 = _query_arrays(gp, d_star, "posterior_var")
    var = np.asarray(
        backend.var_batch(d, gp.dataset.inputs, gp.chol, sf2, inv_len2, gp.hyper.sigma_eps**2)
    )
    low = var.min() if var.size else 0.0
    if low < VAR_CLAMP_THRESHOLD:
        raise NumericalError(
            f"posterior variance {low:.3e} below clamp threshold {VAR_CLAMP_THRESHOLD:.0e}"
        )
    return np.maximum(var, 0.0)


def posterior_var(gp: TrainedGp, d_star: np.ndarray) -> float:
    """Posterior variance at a single test input; includes sigma_eps^2 at the
    test point so the far-field limit equals sigma_f^2 + sigma_eps^2."""
    return float(posterior_var_batch(gp, np.ravel(d_star)[None, :])[0])


def posterior_std_batch(gp: TrainedGp, d_star: np.ndarray) -> np.ndarray:
    return np.sqrt(posterior_var_batch(gp, d_star))


def posterior_mean_grad_batch(gp: TrainedGp, d_star: np.ndarray) -> np.ndarray:
    """Gradients of the posterior mean w.r.t. the test input, shape (M, nd)."""
    d, sf2, inv_len2 = _query_arrays(gp, d_star, "posterior_mean_grad")
    return np.asarray(
        backend.mean_grad_batch(d, gp.dataset.inputs, gp.weights, sf2, inv_len2)
    )


def posterior_mean_grad(gp: TrainedGp, d_star: np.ndarray) -> np.ndarray:
    """Analytic gradient sum_i alpha_i k(d*, d_i) Lambda^-1 (d_i - d*)."""
    return posterior_mean_grad_batch(gp, np.ravel(d_star)[None, :])[0]


def log_marginal_likelihood(ds: Dataset, hyper: Hyperparameters):
    """Log marginal likelihood and its gradient w.r.t. the log-hyperparameters.

    Returns (lml, grad) with grad ordered (log sigma_f, log phi_1..phi_nd,
    log sigma_eps); the gradient uses the standard trace identity
    d lml / d theta = 0.5 tr((alpha alpha^T - K^-1) dK/dtheta).
    """
    if ds.n_dims != hyper.n_dims:
        raise ContractViolationError("dataset / hyperparameter dimension mismatch")
    n = ds.n_samples
    sf2 = hyper.sigma_f**2
    inv_len2 = np.ascontiguousarray(1.0 / hyper.lengthscales**2)
    k_se = np.asarray(backend.cross_cov(ds.inputs, ds.inputs, sf2, inv_len2))
    _, chol, jitter = _gram_with_jitter(ds, hyper)
    alpha = cho_solve((chol, True), ds.outputs, check_finite=False)
    lml = (
        -0.5 * float(ds.outputs @ alpha)
        - float(np.sum(np.log(np.diag(chol))))
        - 0.5 * n * LOG_2PI
    )
    k_inv = cho_solve((chol, True), np.eye(n), check_finite=False)
    a = np.outer(alpha, alpha) - k_inv
    grad = np.empty(hyper.n_dims + 2)
    grad[0] = float(np.sum(a * k_se))  # dK/dlog sigma_f = 2 K_se, times 1/2
    diff = ds.inputs[:, None, :] - ds.inputs[None, :, :]
    for d in range(hyper.n_dims):
        dk = k_se * (diff[:, :, d] ** 2 * inv_len2[d])
        grad[1 + d] = 0.5 * float(np.sum(a * dk))
    grad[-1] = hyper.sigma_eps**2 * float(np.trace(a))
    return lml, grad


@dataclass(frozen=True)
class GpOptimizerOptions:
    """Multi-start gradient-ascent settings for hyperparameter tuning.

    ``restarts`` random starts are drawn log-uniformly from the boxes (data-
    driven defaults when a box is None); a deterministic heuristic start and
    any ``extra_starts`` are always included.  Restart results are merged by
    best LML with ties broken by start index.
    """

    restarts: int = 10
    max_iter: int = 500
    grad_tol: float = 1e-6
    seed: int = 0
    sigma_f_box: tuple | None = None
    lengthscale_box: tuple | None = None
    sigma_eps_box: tuple | None = None
    extra_starts: tuple = ()


def _default_boxes(ds: Dataset, opts: GpOptimizerOptions):
    scale_y = max(float(np.sqrt(np.mean(ds.outputs**2))), 1e-6)
    spans = ds.inputs.max(axis=0) - ds.inputs.min(axis=0)
    scale_d = float(np.max(spans)) if np.max(spans) > 0 else 1.0
    sf_box = opts.sigma_f_box or (1e-2 * scale_y, 1e1 * scale_y)
    ls_box = opts.lengthscale_box or (5e-2 * scale_d, 1e1 * scale_d)
    se_box = opts.sigma_eps_box or (1e-4 * scale_y, 1.0 * scale_y)
    return sf_box, ls_box, se_box


def _heuristic_start(ds: Dataset, boxes) -> Hyperparameters:
    sf_box, ls_box, se_box = boxes
    scale_y = max(float(np.sqrt(np.mean(ds.outputs**2))), 1e-6)
    ls = np.std(ds.inputs, axis=0)
    ls = np.where(ls > 0, ls, np.sqrt(ls_box[0] * ls_box[1]))
    return Hyperparameters(
        np.clip(scale_y, *sf_box),
        np.clip(ls, *ls_box),
        np.clip(0.1 * scale_y, *se_box),
    )


def _ascend(ds: Dataset, theta0: np.ndarray, opts: GpOptimizerOptions):
    """Backtracking-line-search gradient ascent on the LML in log space.

    Returns (lml, theta); lml is -inf when even the start is infeasible.
    """

    def evaluate(theta):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return log_marginal_likelihood(ds, Hyperparameters.from_log_vector(theta))
        except (NumericalError, np.linalg.LinAlgError):
            return -np.inf, None

    theta = np.clip(theta0, -40.0, 40.0)
    f, g = evaluate(theta)
    if not np.isfinite(f):
        return -np.inf, theta
    step = 1.0
    for _ in range(opts.max_iter):
        if np.max(np.abs(g)) < opts.grad_tol:
            break
        gnorm2 = float(g @ g)
        t = step
        accepted = False
        while t > 1e-18:
            theta_new = np.clip(theta + t * g, -40.0, 40.0)
            f_new, g_new = evaluate(theta_new)
            if np.isfinite(f_new) and f_new >= f + 1e-4 * t * gnorm2:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        theta, f, g = theta_new, f_new, g_new
        step = min(t * 2.0, 1e3)
    return f, theta


def optimize_hyperparameters(ds: Dataset, opts: GpOptimizerOptions | None = None) -> Hyperparameters:
    """Tune hyperparameters by maximizing the log marginal likelihood.

    Deterministic under a fixed ``opts.seed``; the achieved LML is at least
    the LML of every start point (ascent only accepts improving steps).
    """
    opts = opts or GpOptimizerOptions()
    if ds.n_samples < 2:
        raise ContractViolationError("hyperparameter optimization needs at least 2 samples")
    boxes = _default_boxes(ds, opts)
    starts = [_heuristic_start(ds, boxes)]
    starts.extend(opts.extra_starts)
    rng = stream(opts.seed, 0)
    sf_box, ls_box, se_box = boxes
    for _ in range(opts.restarts):
        sf = math.exp(rng.uniform(math.log(sf_box[0]), math.log(sf_box[1])))
        ls = np.exp(rng.uniform(math.log(ls_box[0]), math.log(ls_box[1]), size=ds.n_dims))
        se = math.exp(rng.uniform(math.log(se_box[0]), math.log(se_box[1])))
        starts.append(Hyperparameters(sf, ls, se))

    best = (-np.inf, None)
    for idx, start in enumerate(starts):
        f, theta = _ascend(ds, start.as_log_vector(), opts)
        if f > best[0]:
            best = (f, theta)
    if best[1] is None:
        raise NumericalError("all hyperparameter starts failed to produce a factorizable Gram")
    return Hyperparameters.from_log_vector(best[1])
