"""Learned state-space model assembled from independent per-component GPs.

n state-component GPs map d(t) = [x(t); u(t)] to the next state components
and p output-component GPs map d(t) to the output components.  The posterior
variances drive the state-dependent weight matrices Q_d = diag(var_x) + Q0 and
R_d = diag(var_y) + R0, whose inverses are sandwiched between the extremal
matrices built from the maximal posterior variance sigma_f^2 + sigma_eps^2.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass

import numpy as np

from . import gp
from .errors import ConfigurationError, ContractViolationError
from .mhe import ModelInterface

_BUNDLE_VERSION = 1


def _check_spd(name: str, mat: np.ndarray, dim: int) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (dim, dim):
        raise ConfigurationError(f"{name} must have shape ({dim}, {dim})")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ConfigurationError(f"{name} must be symmetric positive definite") from None
    return mat


@dataclass(frozen=True)
class GpStateSpaceModel:
    """n + p trained GPs plus the base weight matrices; immutable."""

    state_gps: tuple
    output_gps: tuple
    n: int
    m: int
    p: int
    q0: np.ndarray
    r0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q0", _check_spd("Q0", self.q0, self.n))
        object.__setattr__(self, "r0", _check_spd("R0", self.r0, self.p))
        for g in (*self.state_gps, *self.output_gps):
            if g.n_dims != self.n + self.m:
                raise ContractViolationError(
                    f"every GP input dim must equal n + m = {self.n + self.m}"
                )


def regression_input(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Stack state and control input in the normative order [x_1..x_n, u_1..u_m]."""
    return np.concatenate([np.ravel(x), np.ravel(u)])


def transition_data(trajectories, n: int, m: int, p: int):
    """Per-transition regression arrays from offline trajectories.

    Row t holds d(t) = [x(t); u(t)]; the state targets are the (noisy)
    successor states x(t+1) and the output targets the measured y(t).
    Returns (inputs (N, n+m), state_targets (N, n), output_targets (N, p)).
    """
    d_rows, x_rows, y_rows = [], [], []
    for traj in trajectories:
        if traj.states.shape[1] != n or traj.inputs.shape[1] != m or traj.outputs.shape[1] != p:
            raise ContractViolationError("trajectory dimensions do not match (n, m, p)")
        for t in range(traj.steps):
            d_rows.append(regression_input(traj.states[t], traj.inputs[t]))
            x_rows.append(traj.states[t + 1])
            y_rows.append(traj.outputs[t])
    if not d_rows:
        raise ConfigurationError("offline trajectories contain no transitions")
    return np.asarray(d_rows), np.asarray(x_rows), np.asarray(y_rows)


def train_state_space_model(
    trajectories,
    q0: np.ndarray,
    r0: np.ndarray,
    optimizer: gp.GpOptimizerOptions | None = None,
    hyperparameters: list | None = None,
) -> GpStateSpaceModel:
    """Fit and tune the n + p component GPs on offline trajectory data.

    Components are tuned independently (component i uses optimizer seed + i).
    Passing ``hyperparameters`` (n + p entries) skips the tuning and fits with
    the given values, which also permits single-transition datasets.
    """
    if len(trajectories) == 0:
        raise ConfigurationError("no offline trajectories supplied")
    n = trajectories[0].states.shape[1]
    m = trajectories[0].inputs.shape[1]
    p = trajectories[0].outputs.shape[1]
    d, x_next, y_meas = transition_data(trajectories, n, m, p)
    optimizer = optimizer or gp.GpOptimizerOptions()

    def fit_component(idx, targets):
        ds = gp.Dataset(d, targets)
        if hyperparameters is not None:
            hyper = hyperparameters[idx]
        else:
            opts = dataclasses.replace(optimizer, seed=optimizer.seed + idx)
            hyper = gp.optimize_hyperparameters(ds, opts)
        return gp.fit(ds, hyper)

    state_gps = tuple(fit_component(i, x_next[:, i]) for i in range(n))
    output_gps = tuple(fit_component(n + j, y_meas[:, j]) for j in range(p))
    return GpStateSpaceModel(state_gps, output_gps, n, m, p, np.asarray(q0), np.asarray(r0))


def predict_state(model: GpStateSpaceModel, d: np.ndarray):
    """Component-wise posterior mean and variance of the next state at d."""
    mean, var = predict_state_batch(model, np.ravel(d)[None, :])
    return mean[0], var[0]


def predict_state_batch(model: GpStateSpaceModel, d: np.ndarray):
    mean = np.column_stack([gp.posterior_mean_batch(g, d) for g in model.state_gps])
    var = np.column_stack([gp.posterior_var_batch(g, d) for g in model.state_gps])
    return mean, var


def predict_output(model: GpStateSpaceModel, d: np.ndarray):
    """Component-wise posterior mean and variance of the output at d."""
    mean, var = predict_output_batch(model, np.ravel(d)[None, :])
    return mean[0], var[0]


def predict_output_batch(model: GpStateSpaceModel, d: np.ndarray):
    mean = np.column_stack([gp.posterior_mean_batch(g, d) for g in model.output_gps])
    var = np.column_stack([gp.posterior_var_batch(g, d) for g in model.output_gps])
    return mean, var


def weight_q(model: GpStateSpaceModel, d: np.ndarray) -> np.ndarray:
    """Process weight Q_d = diag(posterior state variances at d) + Q0."""
    return weight_q_batch(model, np.ravel(d)[None, :])[0]


def weight_q_batch(model: GpStateSpaceModel, d: np.ndarray) -> np.ndarray:
    _, var = predict_state_batch(model, d)
    out = np.broadcast_to(model.q0, (d.shape[0], model.n, model.n)).copy()
    idx = np.arange(model.n)
    out[:, idx, idx] += var
    return out


def weight_r(model: GpStateSpaceModel, d: np.ndarray) -> np.ndarray:
    """Measurement weight R_d = diag(posterior output variances at d) + R0."""
    return weight_r_batch(model, np.ravel(d)[None, :])[0]


def weight_r_batch(model: GpStateSpaceModel, d: np.ndarray) -> np.ndarray:
    _, var = predict_output_batch(model, d)
    out = np.broadcast_to(model.r0, (d.shape[0], model.p, model.p)).copy()
    idx = np.arange(model.p)
    out[:, idx, idx] += var
    return out


def _sym_inv(mat: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(mat)
    return 0.5 * (inv + inv.T)


@dataclass(frozen=True)
class ExtremalWeights:
    """Inverse-weight sandwich: Q_min^-1 <= Q_d^-1 <= Q_max^-1 (PSD order) and
    the R analogue, from zero / maximal posterior variance."""

    q_min_inv: np.ndarray
    q_max_inv: np.ndarray
    r_min_inv: np.ndarray
    r_max_inv: np.ndarray

    @classmethod
    def from_base(cls, q0, r0, max_var_x=None, max_var_y=None) -> "ExtremalWeights":
        """Build from base weights and per-component maximal variances (zero
        variances give Q_min^-1 = Q_max^-1 = Q0^-1, the exact-model case)."""
        q0 = np.asarray(q0, dtype=float)
        r0 = np.asarray(r0, dtype=float)
        vx = np.zeros(q0.shape[0]) if max_var_x is None else np.asarray(max_var_x, dtype=float)
        vy = np.zeros(r0.shape[0]) if max_var_y is None else np.asarray(max_var_y, dtype=float)
        return cls(
            _sym_inv(q0 + np.diag(vx)),
            _sym_inv(q0),
            _sym_inv(r0 + np.diag(vy)),
            _sym_inv(r0),
        )


def extremal_weights(model: GpStateSpaceModel) -> ExtremalWeights:
    """Extremal inverse weights of a trained model: the minimum uses the
    far-field variance bound sigma_f^2 + sigma_eps^2 per component."""
    max_var_x = np.array(
        [g.hyper.sigma_f**2 + g.hyper.sigma_eps**2 for g in model.state_gps]
    )
    max_var_y = np.array(
        [g.hyper.sigma_f**2 + g.hyper.sigma_eps**2 for g in model.output_gps]
    )
    return ExtremalWeights.from_base(model.q0, model.r0, max_var_x, max_var_y)


class GpModelInterface(ModelInterface):
    """Adapter running the learned model inside the window solver."""

    def __init__(self, model: GpStateSpaceModel):
        self.model = model
        self.n, self.m, self.p = model.n, model.m, model.p

    def state_mean(self, d):
        d = np.atleast_2d(np.asarray(d, dtype=float))
        means = np.column_stack(
            [gp.posterior_mean_batch(g, d) for g in self.model.state_gps]
        )
        jacs = np.stack(
            [gp.posterior_mean_grad_batch(g, d) for g in self.model.state_gps], axis=1
        )
        return means, jacs

    def output_mean(self, d):
        d = np.atleast_2d(np.asarray(d, dtype=float))
        means = np.column_stack(
            [gp.posterior_mean_batch(g, d) for g in self.model.output_gps]
        )
        jacs = np.stack(
            [gp.posterior_mean_grad_batch(g, d) for g in self.model.output_gps], axis=1
        )
        return means, jacs

    def weight_q(self, d):
        return weight_q_batch(self.model, np.atleast_2d(np.asarray(d, dtype=float)))

    def weight_r(self, d):
        return weight_r_batch(self.model, np.atleast_2d(np.asarray(d, dtype=float)))


def save_model(model: GpStateSpaceModel, path) -> None:
    """Persist the model as a single npz bundle (datasets, hyperparameters,
    base weights, dimension metadata); arrays round-trip bit-exactly."""
    meta = {"version": _BUNDLE_VERSION, "n": model.n, "m": model.m, "p": model.p}
    arrays = {
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        "q0": model.q0,
        "r0": model.r0,
    }
    for prefix, gps in (("state", model.state_gps), ("output", model.output_gps)):
        for i, g in enumerate(gps):
            arrays[f"{prefix}{i}_inputs"] = g.dataset.inputs
            arrays[f"{prefix}{i}_targets"] = g.dataset.outputs
            arrays[f"{prefix}{i}_hyper"] = np.concatenate(
                [[g.hyper.sigma_f], g.hyper.lengthscales, [g.hyper.sigma_eps]]
            )
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path) -> GpStateSpaceModel:
    """Load a bundle written by :func:`save_model`; the Cholesky factors are
    recomputed deterministically from the stored data."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != _BUNDLE_VERSION:
            raise ConfigurationError(f"unsupported model bundle version: {meta.get('version')}")
        n, m, p = meta["n"], meta["m"], meta["p"]

        def load_gp(prefix, i):
            hyper_vec = data[f"{prefix}{i}_hyper"]
            hyper = gp.Hyperparameters(hyper_vec[0], hyper_vec[1:-1], hyper_vec[-1])
            ds = gp.Dataset(data[f"{prefix}{i}_inputs"], data[f"{prefix}{i}_targets"])
            return gp.fit(ds, hyper)

        state_gps = tuple(load_gp("state", i) for i in range(n))
        output_gps = tuple(load_gp("output", j) for j in range(p))
        return GpStateSpaceModel(state_gps, output_gps, n, m, p, data["q0"], data["r0"])
