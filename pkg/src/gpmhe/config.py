"""Experiment configuration: one YAML file drives every CLI command.

Matrix-valued keys accept a scalar (multiple of the identity), a flat list
(diagonal) or a nested list (full matrix).  See ``configs/batch_reactor.yaml``
for the reference experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .dynamics import NoiseSpec, TrueSystem, batch_reactor, reactor_lipschitz_constants
from .errors import ConfigurationError
from .gp import GpOptimizerOptions
from .mhe import MheConfig, SolverOptions


def as_matrix(value, dim: int, name: str) -> np.ndarray:
    """Scalar -> value * I, flat list -> diag(list), nested list -> full matrix."""
    if value is None:
        raise ConfigurationError(f"{name} is required")
    if np.isscalar(value):
        return float(value) * np.eye(dim)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        if arr.size != dim:
            raise ConfigurationError(f"{name}: expected {dim} diagonal entries, got {arr.size}")
        return np.diag(arr)
    if arr.shape != (dim, dim):
        raise ConfigurationError(f"{name}: expected a {dim}x{dim} matrix, got shape {arr.shape}")
    return arr


def _vector(value, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).ravel()
    if arr.size != dim:
        raise ConfigurationError(f"{name}: expected {dim} entries, got {arr.size}")
    return arr


@dataclass(frozen=True)
class BoundsSettings:
    p1: np.ndarray
    p2: np.ndarray
    eta: float
    alpha_grid: np.ndarray
    tau: float
    delta: float
    prob_grid: np.ndarray


@dataclass(frozen=True)
class ExperimentConfig:
    system_name: str
    noise: NoiseSpec
    offline_steps: int
    offline_seed: int
    offline_sets: dict  # name -> (n_ics, n) array of initial conditions
    gp_q0: np.ndarray
    gp_r0: np.ndarray
    gp_optimizer: GpOptimizerOptions
    mhe: MheConfig
    prior0: np.ndarray
    estimate_x0: np.ndarray
    estimate_steps: int
    estimators: tuple
    bounds: BoundsSettings
    seeds: tuple
    output_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    def system(self) -> TrueSystem:
        if self.system_name != "batch_reactor":
            raise ConfigurationError(f"unknown system: {self.system_name!r}")
        return batch_reactor()

    def lipschitz_constants(self):
        """Per-component Lipschitz constants of the true maps on the state box."""
        if self.system_name != "batch_reactor":
            raise ConfigurationError(f"no Lipschitz helper for system {self.system_name!r}")
        return reactor_lipschitz_constants(self.mhe.x_lower, self.mhe.x_upper)


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ConfigurationError(f"missing config key: {context}.{key}")
    return mapping[key]


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    try:
        system_name = _require(data.get("system", {}), "name", "system")
        sys_dims = {"batch_reactor": (2, 0, 1)}.get(system_name)
        if sys_dims is None:
            raise ConfigurationError(f"unknown system: {system_name!r}")
        n, _, p = sys_dims

        noise_raw = data.get("noise", {})
        noise = NoiseSpec(
            float(noise_raw.get("sigma_w", 0.0)),
            float(noise_raw.get("sigma_v", 0.0)),
            int(noise_raw.get("seed", 0)),
        )

        off = data.get("offline", {})
        sets_raw = _require(off, "sets", "offline")
        if not sets_raw:
            raise ConfigurationError("offline.sets must name at least one trajectory set")
        offline_sets = {}
        for name, ics in sets_raw.items():
            arr = np.asarray(ics, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != n or arr.shape[0] < 1:
                raise ConfigurationError(
                    f"offline.sets.{name} must be a non-empty list of {n}-vectors"
                )
            offline_sets[str(name)] = arr

        gp_raw = data.get("gp", {})
        q0 = as_matrix(_require(gp_raw, "q0", "gp"), n, "gp.q0")
        r0 = as_matrix(_require(gp_raw, "r0", "gp"), p, "gp.r0")
        opt_raw = gp_raw.get("optimizer", {})
        optimizer = GpOptimizerOptions(
            restarts=int(opt_raw.get("restarts", 10)),
            max_iter=int(opt_raw.get("max_iter", 500)),
            grad_tol=float(opt_raw.get("grad_tol", 1e-6)),
            seed=int(opt_raw.get("seed", 0)),
        )

        mhe_raw = data.get("mhe", {})
        solver_raw = mhe_raw.get("solver", {})
        solver = SolverOptions(
            max_iter=int(solver_raw.get("max_iter", 100)),
            step_tol=float(solver_raw.get("step_tol", 1e-8)),
            grad_tol=float(solver_raw.get("grad_tol", 1e-6)),
            lm_lambda0=float(solver_raw.get("lm_lambda0", 1e-3)),
        )
        x_lower = _vector(_require(mhe_raw, "x_lower", "mhe"), n, "mhe.x_lower")
        x_upper = _vector(_require(mhe_raw, "x_upper", "mhe"), n, "mhe.x_upper")
        mhe_cfg = MheConfig(
            horizon=int(_require(mhe_raw, "horizon", "mhe")),
            eta=float(_require(mhe_raw, "eta", "mhe")),
            p2=as_matrix(mhe_raw.get("p2", 1.0), n, "mhe.p2"),
            x_lower=x_lower,
            x_upper=x_upper,
            solver=solver,
        )
        prior0 = _vector(mhe_raw.get("prior0", [4.0] * n), n, "mhe.prior0")

        est_raw = data.get("estimate", {})
        estimators = tuple(est_raw.get("estimators", ["mb"]))
        estimate_x0 = _vector(_require(est_raw, "x0", "estimate"), n, "estimate.x0")

        bounds_raw = data.get("bounds", {})
        bounds_settings = BoundsSettings(
            p1=as_matrix(bounds_raw.get("p1", 1.0), n, "bounds.p1"),
            p2=as_matrix(bounds_raw.get("p2", 1.0), n, "bounds.p2"),
            eta=float(bounds_raw.get("eta", mhe_cfg.eta)),
            alpha_grid=np.atleast_1d(np.asarray(bounds_raw.get("alpha_grid", 45), dtype=int)),
            tau=float(bounds_raw.get("tau", 0.1)),
            delta=float(bounds_raw.get("delta", 0.05)),
            prob_grid=np.atleast_1d(np.asarray(bounds_raw.get("prob_grid", 45), dtype=int)),
        )

        seeds = tuple(int(s) for s in data.get("seeds", [1]))
        if not seeds:
            raise ConfigurationError("seeds must list at least one seed")

        return ExperimentConfig(
            system_name=system_name,
            noise=noise,
            offline_steps=int(off.get("steps", 30)),
            offline_seed=int(off.get("seed", 0)),
            offline_sets=offline_sets,
            gp_q0=q0,
            gp_r0=r0,
            gp_optimizer=optimizer,
            mhe=mhe_cfg,
            prior0=prior0,
            estimate_x0=estimate_x0,
            estimate_steps=int(est_raw.get("steps", 30)),
            estimators=estimators,
            bounds=bounds_settings,
            seeds=seeds,
            output_dir=str(data.get("output_dir", "out")),
            raw=data,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config value: {exc}") from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from None
    return parse_config(data if data is not None else {})


def apply_overrides(cfg: ExperimentConfig, seeds=None, out=None, estimators=None) -> ExperimentConfig:
    """CLI overrides of scalar keys; recorded in the snapshot via ``raw``."""
    raw = dict(cfg.raw)
    overrides = {}
    if seeds:
        cfg = replace(cfg, seeds=tuple(int(s) for s in seeds))
        overrides["seeds"] = list(cfg.seeds)
    if out:
        cfg = replace(cfg, output_dir=str(out))
        overrides["output_dir"] = str(out)
    if estimators:
        cfg = replace(cfg, estimators=tuple(estimators))
        overrides["estimators"] = list(cfg.estimators)
    if overrides:
        raw = {**raw, "overrides": overrides}
        cfg = replace(cfg, raw=raw)
    return cfg
