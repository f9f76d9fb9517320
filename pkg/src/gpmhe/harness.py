"""Experiment orchestration behind the CLI verbs.

Every command reads one ExperimentConfig, writes CSV/text artifacts into the
output directory with atomic replace-on-write, and is byte-deterministic for
a fixed config and seed list.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import bounds as bounds_mod
from . import model as model_mod
from .config import ExperimentConfig
from .dynamics import NoiseSpec, Trajectory, simulate
from .errors import ConfigurationError, ContractViolationError
from .gp import log_marginal_likelihood
from .mhe import EstimatorState, ExactModelInterface, estimator_step

logger = logging.getLogger(__name__)

RMSE_WINDOW = (10, 30)

_SERIES_NAMES = {"mb": "MB MHE", "gp5": "GP MHE", "gp3": "GP MHE 3 traj"}


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_text_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv_atomic(path: str, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    write_text_atomic(path, buf.getvalue())


def _outdir(cfg: ExperimentConfig, out=None) -> str:
    path = out or cfg.output_dir
    os.makedirs(path, exist_ok=True)
    return path


def trajectory_path(outdir, set_name, index) -> str:
    return os.path.join(outdir, f"offline_{set_name}_traj{index}.csv")


def model_path(outdir, set_name) -> str:
    return os.path.join(outdir, f"model_{set_name}.npz")


def run_record_path(outdir, seed) -> str:
    return os.path.join(outdir, f"run_seed{seed}.json")


def cmd_collect(cfg: ExperimentConfig, out=None) -> list[str]:
    """Simulate the offline trajectory sets and write one CSV per trajectory."""
    outdir = _outdir(cfg, out)
    system = cfg.system()
    paths = []
    summary = [f"system: {cfg.system_name}", f"steps: {cfg.offline_steps}",
               f"sigma_w: {_fmt(cfg.noise.sigma_w)}", f"sigma_v: {_fmt(cfg.noise.sigma_v)}",
               f"seed: {cfg.offline_seed}"]
    for set_idx, (name, ics) in enumerate(sorted(cfg.offline_sets.items())):
        for i, x0 in enumerate(ics):
            noise = NoiseSpec(cfg.noise.sigma_w, cfg.noise.sigma_v, cfg.offline_seed)
            traj = simulate(system, x0, None, cfg.offline_steps, noise,
                            stream_ids=(set_idx, i))
            path = trajectory_path(outdir, name, i)
            write_text_atomic(path, traj.to_csv())
            paths.append(path)
        summary.append(f"set {name}: {len(ics)} trajectories of {cfg.offline_steps + 1} states")
    write_text_atomic(os.path.join(outdir, "collect_summary.txt"), "\n".join(summary) + "\n")
    return paths


def _load_offline_set(cfg: ExperimentConfig, outdir: str, name: str) -> list[Trajectory]:
    system = cfg.system()
    trajectories = []
    for i in range(cfg.offline_sets[name].shape[0]):
        path = trajectory_path(outdir, name, i)
        if not os.path.exists(path):
            raise FileNotFoundError(f"offline data file missing (run collect first): {path}")
        with open(path, "r", encoding="utf-8") as fh:
            trajectories.append(Trajectory.from_csv(fh.read(), system.n, system.m, system.p))
    return trajectories


def cmd_train(cfg: ExperimentConfig, out=None, sets=None) -> dict:
    """Train one GP state-space model per offline set and persist the bundles."""
    outdir = _outdir(cfg, out)
    names = sorted(sets or cfg.offline_sets.keys())
    bundles = {}
    for name in names:
        if name not in cfg.offline_sets:
            raise ConfigurationError(f"unknown offline set: {name!r}")
        trajectories = _load_offline_set(cfg, outdir, name)
        model = model_mod.train_state_space_model(
            trajectories, cfg.gp_q0, cfg.gp_r0, cfg.gp_optimizer
        )
        path = model_path(outdir, name)
        model_mod.save_model(model, path)
        bundles[name] = path
        report = [f"set: {name}", f"transitions: {model.state_gps[0].dataset.n_samples}"]
        for label, gps in (("state", model.state_gps), ("output", model.output_gps)):
            for i, g in enumerate(gps):
                lml, _ = log_marginal_likelihood(g.dataset, g.hyper)
                report.append(
                    f"{label}_{i}: sigma_f={_fmt(g.hyper.sigma_f)} "
                    f"lengthscales={[_fmt(v) for v in g.hyper.lengthscales]} "
                    f"sigma_eps={_fmt(g.hyper.sigma_eps)} lml={_fmt(lml)}"
                )
        write_text_atomic(os.path.join(outdir, f"train_{name}.txt"), "\n".join(report) + "\n")
    return bundles


def build_estimator_interface(cfg: ExperimentConfig, outdir: str, name: str):
    """'mb' wraps the exact system; any other name loads its model bundle."""
    if name == "mb":
        return ExactModelInterface(cfg.system(), cfg.gp_q0, cfg.gp_r0)
    path = model_path(outdir, name)
    if not os.path.exists(path):
        raise FileNotFoundError(f"model bundle missing (run train first): {path}")
    return model_mod.GpModelInterface(model_mod.load_model(path))


def rmse(x_true: np.ndarray, x_est: np.ndarray, window=None) -> float:
    """Root-mean-square Euclidean state error, optionally over t in [a, b]."""
    err2 = np.sum((np.asarray(x_est) - np.asarray(x_true)) ** 2, axis=1)
    if window is not None:
        a, b = window
        b = min(b, len(err2) - 1)
        if a > b:
            raise ContractViolationError("RMSE window is empty for this run length")
        err2 = err2[a : b + 1]
    return float(np.sqrt(np.mean(err2)))


def run_estimator(cfg: ExperimentConfig, iface, truth: Trajectory) -> dict:
    """Run one estimator over a simulated run; returns the trace as a dict."""
    state = EstimatorState.initial(cfg.prior0, cfg.mhe)
    estimates = [np.asarray(cfg.prior0, dtype=float)]
    costs, iterations, converged, grad_norms = [], [], [], []
    for t in range(truth.steps):
        est, sol, state = estimator_step(state, cfg.mhe, iface, truth.inputs[t], truth.outputs[t])
        estimates.append(est)
        costs.append(sol.cost)
        iterations.append(sol.iterations)
        converged.append(bool(sol.converged))
        grad_norms.append(sol.grad_norm)
    x_est = np.asarray(estimates)
    return {
        "estimates": x_est.tolist(),
        "costs": costs,
        "iterations": iterations,
        "converged": converged,
        "grad_norms": grad_norms,
        "rmse_full": rmse(truth.states, x_est),
        "rmse_window": rmse(truth.states, x_est, RMSE_WINDOW),
    }


def cmd_estimate(cfg: ExperimentConfig, out=None) -> list[str]:
    """Simulate the true system per seed (shared noise stream) and run every
    configured estimator through the window solver; writes traces + records."""
    outdir = _outdir(cfg, out)
    system = cfg.system()
    interfaces = {name: build_estimator_interface(cfg, outdir, name) for name in cfg.estimators}
    record_paths = []
    for seed in cfg.seeds:
        noise = NoiseSpec(cfg.noise.sigma_w, cfg.noise.sigma_v, seed)
        truth = simulate(system, cfg.estimate_x0, None, cfg.estimate_steps, noise,
                         stream_ids=(0,))
        record = {
            "seed": seed,
            "config": cfg.raw,
            "rmse_window": list(RMSE_WINDOW),
            "truth": {
                "states": truth.states.tolist(),
                "inputs": truth.inputs.tolist(),
                "outputs": truth.outputs.tolist(),
                "w": truth.w.tolist(),
                "v": truth.v.tolist(),
            },
            "estimators": {},
        }
        for name in cfg.estimators:
            trace = run_estimator(cfg, interfaces[name], truth)
            record["estimators"][name] = trace
            rows = []
            for t in range(truth.steps + 1):
                row = [t, *truth.states[t], *trace["estimates"][t]]
                if t == 0:
                    row += ["", "", ""]
                else:
                    row += [trace["costs"][t - 1], trace["iterations"][t - 1],
                            int(trace["converged"][t - 1])]
                rows.append(row)
            header = (
                ["t"]
                + [f"x_{i + 1}_true" for i in range(system.n)]
                + [f"x_{i + 1}_est" for i in range(system.n)]
                + ["cost", "iterations", "converged"]
            )
            write_csv_atomic(os.path.join(outdir, f"trace_{name}_seed{seed}.csv"), header, rows)
        path = run_record_path(outdir, seed)
        write_text_atomic(path, json.dumps(record, sort_keys=True, indent=1) + "\n")
        record_paths.append(path)
    return record_paths


def _load_records(cfg: ExperimentConfig, outdir: str) -> list[dict]:
    records = []
    for seed in cfg.seeds:
        path = run_record_path(outdir, seed)
        if not os.path.exists(path):
            raise FileNotFoundError(f"run record missing (run estimate first): {path}")
        with open(path, "r", encoding="utf-8") as fh:
            records.append(json.load(fh))
    if not records:
        raise ConfigurationError("no run records to compare")
    return records


def cmd_compare(cfg: ExperimentConfig, out=None) -> dict:
    """Aggregate run records into RMSE tables and a plot-ready long CSV."""
    outdir = _outdir(cfg, out)
    records = _load_records(cfg, outdir)
    names = [n for n in cfg.estimators if n in records[0]["estimators"]]
    lengths = {len(r["truth"]["states"]) for r in records}
    if len(lengths) != 1:
        raise ContractViolationError(f"run records have mismatched lengths: {sorted(lengths)}")

    rows = []
    for record in records:
        for name in names:
            est = record["estimators"][name]
            rows.append([record["seed"], name, est["rmse_full"], est["rmse_window"]])
    write_csv_atomic(
        os.path.join(outdir, "compare_rmse.csv"),
        ["seed", "estimator", "rmse_full", "rmse_window"],
        rows,
    )

    summary = {}
    lines = [f"runs: {len(records)}", f"rmse window: t in {list(RMSE_WINDOW)}"]
    for name in names:
        full = np.array([r["estimators"][name]["rmse_full"] for r in records])
        win = np.array([r["estimators"][name]["rmse_window"] for r in records])
        summary[name] = {
            "mean_rmse_full": float(full.mean()),
            "std_rmse_full": float(full.std()),
            "mean_rmse_window": float(win.mean()),
            "std_rmse_window": float(win.std()),
        }
        lines.append(
            f"{name}: mean_rmse_window={_fmt(summary[name]['mean_rmse_window'])} "
            f"std={_fmt(summary[name]['std_rmse_window'])} "
            f"mean_rmse_full={_fmt(summary[name]['mean_rmse_full'])} "
            f"std={_fmt(summary[name]['std_rmse_full'])}"
        )
    write_text_atomic(os.path.join(outdir, "compare_summary.txt"), "\n".join(lines) + "\n")

    series = [_SERIES_NAMES.get(n, n) for n in names]
    header = ["seed", "t", "state", "True", *series]
    long_rows = []
    for record in records:
        states = np.asarray(record["truth"]["states"])
        for t in range(states.shape[0]):
            for i in range(states.shape[1]):
                row = [record["seed"], t, i + 1, states[t, i]]
                row += [record["estimators"][n]["estimates"][t][i] for n in names]
                long_rows.append(row)
    write_csv_atomic(os.path.join(outdir, "compare_trajectories.csv"), header, long_rows)
    return summary


def estimator_stability_constants(cfg: ExperimentConfig, outdir: str, name: str):
    """Stability constants for one estimator: detectability config plus the
    model's extremal weights and grid-maximized mismatch (zero for 'mb')."""
    detect = bounds_mod.DetectabilityConfig(cfg.bounds.p1, cfg.bounds.p2, cfg.bounds.eta)
    x_box = (cfg.mhe.x_lower, cfg.mhe.x_upper)
    if name == "mb":
        extremal = model_mod.ExtremalWeights.from_base(cfg.gp_q0, cfg.gp_r0)
        consts = bounds_mod.stability_constants(detect, extremal)
        return consts, None, None
    model = model_mod.load_model(model_path(outdir, name))
    mismatch = bounds_mod.max_model_mismatch(
        model, cfg.system(), x_box, None, cfg.bounds.alpha_grid
    )
    consts = bounds_mod.stability_constants(
        detect, model_mod.extremal_weights(model), mismatch.alpha1_max, mismatch.alpha2_max
    )
    return consts, model, mismatch


def cmd_bounds(cfg: ExperimentConfig, out=None, estimator=None) -> dict:
    """Evaluate the deterministic and probabilistic error bounds on stored runs."""
    outdir = _outdir(cfg, out)
    name = estimator or cfg.estimators[0]
    records = _load_records(cfg, outdir)
    if any(name not in r["estimators"] for r in records):
        raise ConfigurationError(f"estimator {name!r} missing from stored run records")
    consts, model, mismatch = estimator_stability_constants(cfg, outdir, name)

    pb = None
    if model is not None:
        lf, lh = cfg.lipschitz_constants()
        pb_cfg = bounds_mod.ProbBoundConfig(
            cfg.bounds.tau, cfg.bounds.delta, lf, lh, cfg.bounds.prob_grid
        )
        pb = bounds_mod.probabilistic_mismatch_bound(
            model, pb_cfg, (cfg.mhe.x_lower, cfg.mhe.x_upper)
        )

    violations = 0
    for record in records:
        seed = record["seed"]
        x_true = np.asarray(record["truth"]["states"])
        x_est = np.asarray(record["estimators"][name]["estimates"])
        w = np.asarray(record["truth"]["w"])
        v = np.asarray(record["truth"]["v"])
        lhs, rhs, branch = bounds_mod.error_bound_trajectory(x_true, x_est, w, v, consts)
        violations += int(np.sum(lhs > rhs))
        write_csv_atomic(
            os.path.join(outdir, f"bounds_theorem_{name}_seed{seed}.csv"),
            ["t", "lhs", "rhs", "active_branch"],
            [[t, lhs[t], rhs[t], int(branch[t])] for t in range(len(lhs))],
        )
        if pb is not None:
            plhs, prhs, pbranch, prob = bounds_mod.probabilistic_bound_trajectory(
                x_true, x_est, w, v, consts, pb
            )
            write_csv_atomic(
                os.path.join(outdir, f"bounds_corollary_{name}_seed{seed}.csv"),
                ["t", "lhs", "rhs", "active_branch", "probability"],
                [[t, plhs[t], prhs[t], int(pbranch[t]), prob] for t in range(len(plhs))],
            )
    if violations:
        logger.warning(
            "error bound violated at %d step(s): the configured detectability "
            "constants (P1, P2, eta) are not consistent with this run", violations,
        )

    lines = [
        f"estimator: {name}",
        f"mu: {_fmt(consts.mu)}",
        f"minimal_horizon: {consts.m_bar}",
        f"alpha1_max: {_fmt(consts.alpha1_max)}",
        f"alpha2_max: {_fmt(consts.alpha2_max)}",
        f"alpha_max: {_fmt(consts.alpha_max)}",
        f"q_max_inv_diag: {[_fmt(v) for v in np.diag(consts.extremal.q_max_inv)]}",
        f"r_max_inv_diag: {[_fmt(v) for v in np.diag(consts.extremal.r_max_inv)]}",
        f"bound_violations: {violations}",
    ]
    if mismatch is not None:
        lines.append(f"alpha_grid_spacing: {[_fmt(v) for v in mismatch.grid_spacing]}")
    if pb is not None:
        lines += [
            f"tau: {_fmt(pb.tau)}",
            f"covering_number: {pb.covering}",
            f"beta: {_fmt(pb.beta)}",
            f"gammas_f: {[_fmt(v) for v in pb.gammas_f]}",
            f"gammas_h: {[_fmt(v) for v in pb.gammas_h]}",
            f"delta_x_max: {_fmt(pb.delta_x_max)}",
            f"delta_y_max: {_fmt(pb.delta_y_max)}",
            f"probability: {_fmt(pb.probability)}",
        ]
    write_text_atomic(os.path.join(outdir, f"bounds_summary_{name}.txt"), "\n".join(lines) + "\n")
    return {"violations": violations, "constants": consts, "prob_bound": pb}
