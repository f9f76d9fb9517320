"""Robust-stability constants and error-bound evaluation.

Given detectability constants (P1, P2, eta) for the learned dynamics, this
module computes the minimal horizon and contraction rate, the worst-case
weighted mismatch between the learned posterior means and the true maps over
the operating box, the resulting deterministic per-step error bound, and the
probabilistic variant built from a covering number, confidence scaling and
component-wise mismatch bounds.

Maxima over compact sets are evaluated on uniform grids (optionally refined
by local ascent from the best grid point); every result reports the grid
constant used so the conservatism is quantifiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import minimize

from . import gp as gp_mod
from . import model as model_mod
from .errors import ConfigurationError, NumericalError
from .model import ExtremalWeights


def _check_pd(name, mat):
    mat = np.asarray(mat, dtype=float)
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ConfigurationError(f"{name} must be symmetric positive definite") from None
    return mat


@dataclass(frozen=True)
class DetectabilityConfig:
    """Quadratic detectability constants: P1 <= P2 in the PSD order, eta in [0, 1)."""

    p1: np.ndarray
    p2: np.ndarray
    eta: float

    def __post_init__(self):
        object.__setattr__(self, "p1", _check_pd("P1", self.p1))
        object.__setattr__(self, "p2", _check_pd("P2", self.p2))
        if not 0.0 <= self.eta < 1.0:
            raise ConfigurationError("eta must lie in [0, 1)")
        if np.linalg.eigvalsh(self.p2 - self.p1).min() < -1e-10:
            raise ConfigurationError("P1 <= P2 in the PSD order is required")


def generalized_max_eigenvalue(p2: np.ndarray, p1: np.ndarray) -> float:
    """Largest lambda with det(P2 - lambda P1) = 0, via Cholesky reduction of P1."""
    l1 = cholesky(np.asarray(p1, dtype=float), lower=True)
    a = solve_triangular(l1, np.asarray(p2, dtype=float), lower=True)
    a = solve_triangular(l1, a.T, lower=True).T
    return float(np.linalg.eigvalsh(0.5 * (a + a.T))[-1])


def minimal_horizon(cfg: DetectabilityConfig) -> tuple[float, int]:
    """Smallest M with 4 lambda_max(P2, P1) eta^M < 1 and the per-step
    contraction rate mu = (4 lambda_max eta^M)^(1/M)."""
    lam = generalized_max_eigenvalue(cfg.p2, cfg.p1)
    if cfg.eta == 0.0:
        return 0.0, 1
    m = 1
    while 4.0 * lam * cfg.eta**m >= 1.0:
        m += 1
        if m > 10**7:
            raise NumericalError("minimal horizon exceeds 1e7; eta too close to 1")
    mu = (4.0 * lam * cfg.eta**m) ** (1.0 / m)
    return mu, m


@dataclass(frozen=True)
class StabilityConstants:
    """Everything the error-bound evaluators need."""

    detect: DetectabilityConfig
    mu: float
    m_bar: int
    alpha1_max: float
    alpha2_max: float
    alpha_max: float
    extremal: ExtremalWeights


def stability_constants(
    detect: DetectabilityConfig,
    extremal: ExtremalWeights,
    alpha1_max: float = 0.0,
    alpha2_max: float = 0.0,
) -> StabilityConstants:
    mu, m_bar = minimal_horizon(detect)
    return StabilityConstants(
        detect, mu, m_bar, alpha1_max, alpha2_max, max(alpha1_max, alpha2_max), extremal
    )


def box_grid(lower, upper, resolution) -> np.ndarray:
    """Uniform grid over an axis-aligned box, shape (prod(resolution), dim);
    single-point axes collapse to the lower bound."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    resolution = np.atleast_1d(np.asarray(resolution, dtype=int))
    if lower.size == 0:
        return np.zeros((1, 0))
    if resolution.size == 1:
        resolution = np.full(lower.size, resolution[0])
    if np.any(resolution < 1):
        raise ConfigurationError("grid resolution must be >= 1 per axis")
    axes = [np.linspace(lower[i], upper[i], resolution[i]) for i in range(lower.size)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def weighted_norm(e: np.ndarray, w: np.ndarray) -> float:
    """sqrt(e^T W e) for a symmetric PSD weight W."""
    return float(np.sqrt(max(float(e @ w @ e), 0.0)))


@dataclass(frozen=True)
class MismatchResult:
    """Worst-case weighted mismatch between learned means and true maps."""

    alpha1_max: float
    alpha2_max: float
    alpha_max: float
    grid_spacing: np.ndarray  # per-axis spacing of the search grid


def max_model_mismatch(
    model: model_mod.GpStateSpaceModel,
    truth,
    x_box,
    u_box=None,
    grid_resolution=45,
    refine: bool = True,
) -> MismatchResult:
    """Maximize ||f(x,u) - mean_x(d)||_{Qmax^-1} and the output analogue over
    a uniform grid on the operating box, optionally refined by local ascent
    from the best grid point.  A validation tool: requires the true maps."""
    ext = model_mod.extremal_weights(model)
    lower = np.asarray(x_box[0], dtype=float)
    upper = np.asarray(x_box[1], dtype=float)
    if u_box is not None and len(np.atleast_1d(u_box[0])) > 0:
        lower = np.concatenate([lower, np.asarray(u_box[0], dtype=float)])
        upper = np.concatenate([upper, np.asarray(u_box[1], dtype=float)])
    resolution = np.atleast_1d(np.asarray(grid_resolution, dtype=int))
    if resolution.size == 1:
        resolution = np.full(lower.size, resolution[0])
    grid = box_grid(lower, upper, resolution)
    if grid.shape[0] == 0:
        raise ConfigurationError("mismatch grid is empty")
    spacing = np.where(resolution > 1, (upper - lower) / np.maximum(resolution - 1, 1), 0.0)

    n = model.n

    def true_rows(fun, dim):
        out = np.empty((grid.shape[0], dim))
        for i, row in enumerate(grid):
            out[i] = fun(row[:n], row[n:])
        return out

    def weighted_norms(err, w):
        return np.sqrt(np.maximum(np.einsum("ki,ij,kj->k", err, w, err), 0.0))

    mean_x, _ = model_mod.predict_state_batch(model, grid)
    mean_y, _ = model_mod.predict_output_batch(model, grid)
    norms1 = weighted_norms(true_rows(truth.f, model.n) - mean_x, ext.q_max_inv)
    norms2 = weighted_norms(true_rows(truth.h, model.p) - mean_y, ext.r_max_inv)

    def refined(norms, fun, mean_fun, w):
        best = float(norms.max())
        if not refine:
            return best
        start = grid[int(norms.argmax())]

        def neg(z):
            e = fun(z[:n], z[n:]) - mean_fun(model, z)[0]
            return -weighted_norm(e, w)

        res = minimize(
            neg, start, method="L-BFGS-B", bounds=list(zip(lower, upper)),
            options={"maxiter": 50},
        )
        return max(best, float(-res.fun))

    alpha1 = refined(norms1, truth.f, model_mod.predict_state, ext.q_max_inv)
    alpha2 = refined(norms2, truth.h, model_mod.predict_output, ext.r_max_inv)
    return MismatchResult(alpha1, alpha2, max(alpha1, alpha2), spacing)


def _branch_trajectories(x_true, x_est, w, v, consts: StabilityConstants, tail_values):
    """Shared Theorem-style bound evaluation; ``tail_values`` lists the
    constant branches appended after the noise branches."""
    x_true = np.asarray(x_true, dtype=float)
    x_est = np.asarray(x_est, dtype=float)
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    steps = x_true.shape[0] - 1
    p1, p2 = consts.detect.p1, consts.detect.p2
    mu = consts.mu
    mu_q = mu**0.25
    c = 12.0 / (1.0 - mu_q)

    e = x_est - x_true
    lhs = np.sqrt(np.maximum(np.einsum("ti,ij,tj->t", e, p1, e), 0.0))
    e0_p2 = weighted_norm(e[0], p2)
    w_norms = np.sqrt(
        np.maximum(np.einsum("ti,ij,tj->t", w, consts.extremal.q_max_inv, w), 0.0)
    )
    v_norms = np.sqrt(
        np.maximum(np.einsum("ti,ij,tj->t", v, consts.extremal.r_max_inv, v), 0.0)
    )

    n_branch = 3 + len(tail_values)
    rhs = np.empty(steps + 1)
    branch = np.empty(steps + 1, dtype=int)
    for t in range(steps + 1):
        vals = np.full(n_branch, -np.inf)
        vals[0] = 6.0 * mu ** (0.5 * t) * e0_p2
        if t > 0:
            q = np.arange(t, dtype=float)
            decay = c * mu_q**q
            vals[1] = float(np.max(decay * w_norms[t - 1 - q.astype(int)]))
            vals[2] = float(np.max(decay * v_norms[t - 1 - q.astype(int)]))
        for i, tail in enumerate(tail_values):
            vals[3 + i] = c * tail
        branch[t] = int(np.argmax(vals))
        rhs[t] = vals[branch[t]]
    return lhs, rhs, branch


def error_bound_trajectory(x_true, x_est, w, v, consts: StabilityConstants):
    """Per-step (lhs, rhs, active_branch) of the deterministic error bound:
    lhs(t) = ||x_est(t) - x_true(t)||_P1, rhs(t) the max of the initial-error
    decay branch, the two discounted noise branches and the mismatch branch.

    Branch indices: 0 initial error, 1 process noise, 2 measurement noise,
    3 model mismatch."""
    return _branch_trajectories(x_true, x_est, w, v, consts, (consts.alpha_max,))


def covering_number(lower, upper, tau: float) -> int:
    """Points of an axis-aligned grid with per-axis spacing 2 tau / sqrt(dim),
    so every box point lies within Euclidean distance tau of the grid."""
    if tau <= 0:
        raise ConfigurationError("tau must be > 0")
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    nd = lower.size
    count = 1
    for lo, hi in zip(lower, upper):
        ratio = (hi - lo) * math.sqrt(nd) / (2.0 * tau)
        count *= max(1, math.ceil(ratio - 1e-9 * max(1.0, abs(ratio))))
    return count


def beta(covering: int, delta: float) -> float:
    """Confidence scaling 2 ln(B / delta)."""
    if covering < 1:
        raise ConfigurationError("covering number must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ConfigurationError("delta must lie in (0, 1)")
    return 2.0 * math.log(covering / delta)


def joint_probability(n: int, p: int, delta: float) -> float:
    """(1 - delta)^(n + p): all n + p component bounds holding jointly."""
    return (1.0 - delta) ** (n + p)


@dataclass(frozen=True)
class ProbBoundConfig:
    """Grid constant, confidence level, true-map Lipschitz constants and the
    search-grid resolution for the probabilistic mismatch bound."""

    tau: float
    delta: float
    lipschitz_f: np.ndarray
    lipschitz_h: np.ndarray
    grid_resolution: np.ndarray | int = 45

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError("tau must be > 0")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError("delta must lie in (0, 1)")
        object.__setattr__(self, "lipschitz_f", np.atleast_1d(np.asarray(self.lipschitz_f, dtype=float)))
        object.__setattr__(self, "lipschitz_h", np.atleast_1d(np.asarray(self.lipschitz_h, dtype=float)))


@dataclass(frozen=True)
class ProbBoundResult:
    covering: int
    beta: float
    gammas_f: np.ndarray
    gammas_h: np.ndarray
    delta_x_max: float
    delta_y_max: float
    probability: float
    tau: float


def _input_box(model, x_box, u_box):
    lower = np.asarray(x_box[0], dtype=float)
    upper = np.asarray(x_box[1], dtype=float)
    if model.m > 0:
        if u_box is None:
            raise ConfigurationError("u_box required when the model has control inputs")
        lower = np.concatenate([lower, np.asarray(u_box[0], dtype=float)])
        upper = np.concatenate([upper, np.asarray(u_box[1], dtype=float)])
    return lower, upper


def _std_modulus(gp_single, grid, tau, lower, upper) -> float:
    """Numerical modulus of continuity of the posterior std at scale tau:
    max |std(d) - std(d')| over deterministic axis/diagonal offsets of
    length tau with both endpoints inside the box."""
    nd = grid.shape[1]
    offsets = []
    for d in range(nd):
        e = np.zeros(nd)
        e[d] = tau
        offsets.extend([e, -e])
    diag = np.full(nd, tau / math.sqrt(nd))
    offsets.extend([diag, -diag])
    base_std = gp_mod.posterior_std_batch(gp_single, grid)
    worst = 0.0
    for off in offsets:
        shifted = grid + off
        mask = np.all((shifted >= lower) & (shifted <= upper), axis=1)
        if not np.any(mask):
            continue
        shifted_std = gp_mod.posterior_std_batch(gp_single, shifted[mask])
        worst = max(worst, float(np.max(np.abs(shifted_std - base_std[mask]))))
    return worst


def gamma_terms(model, cfg: ProbBoundConfig, x_box, u_box=None):
    """Per-component continuity terms gamma = (L_mean + L_true) tau +
    sqrt(beta) * omega_std(tau).  Mean Lipschitz constants are grid maxima of
    the analytic posterior-mean gradient norm; the std moduli of continuity
    are estimated numerically at scale tau."""
    if cfg.lipschitz_f.size != model.n or cfg.lipschitz_h.size != model.p:
        raise ConfigurationError(
            "lipschitz_f / lipschitz_h must provide one constant per state/output component"
        )
    lower, upper = _input_box(model, x_box, u_box)
    grid = box_grid(lower, upper, cfg.grid_resolution)
    b = beta(covering_number(lower, upper, cfg.tau), cfg.delta)
    sqrt_b = math.sqrt(b)

    def per_component(gps, lipschitz):
        gammas = np.empty(len(gps))
        for i, g in enumerate(gps):
            grad = gp_mod.posterior_mean_grad_batch(g, grid)
            l_mean = float(np.max(np.linalg.norm(grad, axis=1)))
            omega = _std_modulus(g, grid, cfg.tau, lower, upper)
            gammas[i] = (l_mean + lipschitz[i]) * cfg.tau + sqrt_b * omega
        return gammas

    gammas_f = per_component(model.state_gps, cfg.lipschitz_f)
    gammas_h = per_component(model.output_gps, cfg.lipschitz_h)
    return gammas_f, gammas_h


def probabilistic_mismatch_bound(
    model, cfg: ProbBoundConfig, x_box, u_box=None
) -> ProbBoundResult:
    """Probabilistic upper bounds on the weighted model mismatch:
    Delta_x = sqrt(lambda_max(Qmax^-1)) * sum_i max_d(sqrt(beta) std_i(d) + gamma_i)
    and the output analogue, holding with probability (1 - delta)^(n + p)."""
    lower, upper = _input_box(model, x_box, u_box)
    b_cov = covering_number(lower, upper, cfg.tau)
    b = beta(b_cov, cfg.delta)
    sqrt_b = math.sqrt(b)
    gammas_f, gammas_h = gamma_terms(model, cfg, x_box, u_box)
    grid = box_grid(lower, upper, cfg.grid_resolution)
    ext = model_mod.extremal_weights(model)

    def total(gps, gammas, w_inv):
        lam = float(np.linalg.eigvalsh(w_inv)[-1])
        acc = 0.0
        for g, gamma in zip(gps, gammas):
            std = gp_mod.posterior_std_batch(g, grid)
            acc += float(np.max(sqrt_b * std + gamma))
        return math.sqrt(lam) * acc

    delta_x = total(model.state_gps, gammas_f, ext.q_max_inv)
    delta_y = total(model.output_gps, gammas_h, ext.r_max_inv)
    return ProbBoundResult(
        b_cov, b, gammas_f, gammas_h, delta_x, delta_y,
        joint_probability(model.n, model.p, cfg.delta), cfg.tau,
    )


def probabilistic_bound_trajectory(
    x_true, x_est, w, v, consts: StabilityConstants, pb: ProbBoundResult
):
    """Like :func:`error_bound_trajectory` but with the mismatch branch split
    into the probabilistic state/output branches (indices 3 and 4); returns
    (lhs, rhs, branch, probability)."""
    lhs, rhs, branch = _branch_trajectories(
        x_true, x_est, w, v, consts, (pb.delta_x_max, pb.delta_y_max)
    )
    return lhs, rhs, branch, pb.probability
