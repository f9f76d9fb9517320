"""Ground-truth system simulation and offline data collection.

Discrete-time systems x(t+1) = f(x(t), u(t)) + w(t), y(t) = h(x(t), u(t)) + v(t)
with isotropic Gaussian process/measurement noise drawn from seeded Philox
streams, plus the Euler-discretized batch-reactor benchmark instance.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ContractViolationError, NumericalError
from .rng import stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrueSystem:
    """State transition f, output map h and their (optional) Jacobians.

    Jacobians are w.r.t. the stacked vector [x; u] with shape (n, n+m) and
    (p, n+m); when absent, consumers fall back to finite differences."""

    name: str
    n: int
    m: int
    p: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    f_jac: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    h_jac: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True)
class NoiseSpec:
    """Isotropic Gaussian noise levels and the master seed for the draws."""

    sigma_w: float
    sigma_v: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma_w < 0 or self.sigma_v < 0:
            raise ContractViolationError("noise stds must be >= 0")


@dataclass(frozen=True)
class Trajectory:
    """A simulated run: T+1 states, T inputs/outputs and the recorded noises.

    Replaying (states[0], inputs, w, v) through f, h reproduces states and
    outputs bit-exactly."""

    states: np.ndarray  # (T+1, n)
    inputs: np.ndarray  # (T, m)
    outputs: np.ndarray  # (T, p)
    w: np.ndarray  # (T, n)
    v: np.ndarray  # (T, p)

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    def to_csv(self) -> str:
        """CSV with columns t, x_*, u_*, y_*, w_*, v_*; the final row carries
        only the terminal state (no input/output/noise)."""
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        p = self.outputs.shape[1]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = (
            ["t"]
            + [f"x_{i + 1}" for i in range(n)]
            + [f"u_{i + 1}" for i in range(m)]
            + [f"y_{i + 1}" for i in range(p)]
            + [f"w_{i + 1}" for i in range(n)]
            + [f"v_{i + 1}" for i in range(p)]
        )
        writer.writerow(header)
        for t in range(self.steps):
            writer.writerow(
                [t]
                + [repr(float(val)) for val in self.states[t]]
                + [repr(float(val)) for val in self.inputs[t]]
                + [repr(float(val)) for val in self.outputs[t]]
                + [repr(float(val)) for val in self.w[t]]
                + [repr(float(val)) for val in self.v[t]]
            )
        writer.writerow(
            [self.steps]
            + [repr(float(val)) for val in self.states[self.steps]]
            + [""] * (m + 2 * p + n)
        )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n: int, m: int, p: int) -> "Trajectory":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        expected_cols = 1 + 2 * n + m + 2 * p
        if len(header) != expected_cols:
            raise ContractViolationError(
                f"trajectory CSV has {len(header)} columns, expected {expected_cols}"
            )
        rows = [row for row in reader if row]
        steps = len(rows) - 1
        states = np.empty((steps + 1, n))
        inputs = np.empty((steps, m))
        outputs = np.empty((steps, p))
        w = np.empty((steps, n))
        v = np.empty((steps, p))
        for t, row in enumerate(rows):
            try:
                states[t] = [float(val) for val in row[1 : 1 + n]]
                if t < steps:
                    o = 1 + n
                    inputs[t] = [float(val) for val in row[o : o + m]]
                    outputs[t] = [float(val) for val in row[o + m : o + m + p]]
                    w[t] = [float(val) for val in row[o + m + p : o + m + p + n]]
                    v[t] = [float(val) for val in row[o + m + p + n :]]
            except ValueError as exc:
                raise ContractViolationError(f"trajectory CSV row {t + 2}: {exc}") from None
        return cls(states, inputs, outputs, w, v)


# Batch reactor constants: Euler discretization step and rate constants.
REACTOR_SAMPLING_TIME = 0.1
REACTOR_K1 = 0.16
REACTOR_K2 = 0.0064


def batch_reactor() -> TrueSystem:
    """Two-state batch-reactor benchmark.

    x1+ = x1 + T(-2 k1 x1^2 + 2 k2 x2), x2+ = x2 + T(k1 x1^2 - k2 x2),
    y = x1 + x2; autonomous (m = 0).  The noise-free map conserves x1 + 2 x2.
    """
    t, k1, k2 = REACTOR_SAMPLING_TIME, REACTOR_K1, REACTOR_K2

    def f(x, u):
        x1, x2 = x
        return np.array(
            [x1 + t * (-2.0 * k1 * x1 * x1 + 2.0 * k2 * x2),
             x2 + t * (k1 * x1 * x1 - k2 * x2)]
        )

    def h(x, u):
        return np.array([x[0] + x[1]])

    def f_jac(x, u):
        x1 = x[0]
        return np.array(
            [[1.0 - 4.0 * t * k1 * x1, 2.0 * t * k2],
             [2.0 * t * k1 * x1, 1.0 - t * k2]]
        )

    def h_jac(x, u):
        return np.array([[1.0, 1.0]])

    return TrueSystem("batch_reactor", 2, 0, 1, f, h, f_jac, h_jac)


def reactor_lipschitz_constants(x_lower, x_upper):
    """Per-component Lipschitz constants of the reactor maps on a state box.

    Each component's gradient depends only on x1 and monotonically in it, so
    the supremum of the gradient norm is attained at an x1 endpoint; returns
    (L_f (2,), L_h (1,)).
    """
    t, k1, k2 = REACTOR_SAMPLING_TIME, REACTOR_K1, REACTOR_K2
    lo, hi = float(x_lower[0]), float(x_upper[0])
    lf1 = max(
        np.hypot(1.0 - 4.0 * t * k1 * x1, 2.0 * t * k2) for x1 in (lo, hi)
    )
    lf2 = max(
        np.hypot(2.0 * t * k1 * x1, 1.0 - t * k2) for x1 in (lo, hi)
    )
    return np.array([lf1, lf2]), np.array([np.sqrt(2.0)])


def simulate(
    sys: TrueSystem,
    x0: np.ndarray,
    u_seq: np.ndarray | None,
    steps: int,
    noise: NoiseSpec,
    stream_ids: tuple[int, ...] = (0,),
    x_box: tuple[np.ndarray, np.ndarray] | None = None,
) -> Trajectory:
    """Roll the system forward ``steps`` steps with seeded Gaussian noise.

    Noise draws come from ``stream(noise.seed, *stream_ids)``; per step the
    process noise w(t) (n values) is drawn before the measurement noise v(t)
    (p values).  States are never clipped; leaving ``x_box`` logs a warning.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.n,):
        raise ContractViolationError(f"x0 must have shape ({sys.n},)")
    if x_box is not None and (np.any(x0 < x_box[0]) or np.any(x0 > x_box[1])):
        raise ContractViolationError(f"x0 {x0} lies outside the configured state box")
    if u_seq is None:
        u_seq = np.zeros((steps, sys.m))
    u_seq = np.asarray(u_seq, dtype=float).reshape(steps, sys.m)
    rng = stream(noise.seed, *stream_ids)

    states = np.empty((steps + 1, sys.n))
    outputs = np.empty((steps, sys.p))
    w = np.empty((steps, sys.n))
    v = np.empty((steps, sys.p))
    states[0] = x0
    left_box = 0
    for t in range(steps):
        w[t] = noise.sigma_w * rng.standard_normal(sys.n)
        v[t] = noise.sigma_v * rng.standard_normal(sys.p)
        outputs[t] = sys.h(states[t], u_seq[t]) + v[t]
        states[t + 1] = sys.f(states[t], u_seq[t]) + w[t]
        if not np.all(np.isfinite(states[t + 1])):
            raise NumericalError(f"non-finite state at step {t + 1}")
        if x_box is not None and (
            np.any(states[t + 1] < x_box[0]) or np.any(states[t + 1] > x_box[1])
        ):
            left_box += 1
    if left_box:
        logger.warning(
            "%s: %d of %d simulated states left the configured state box",
            sys.name, left_box, steps,
        )
    return Trajectory(states, u_seq, outputs, w, v)


def collect_offline_data(
    sys: TrueSystem,
    initial_conditions,
    steps: int,
    noise: NoiseSpec,
    stream_prefix: tuple[int, ...] = (),
    x_box=None,
) -> list[Trajectory]:
    """Simulate one trajectory per initial condition with independent noise
    streams (stream id = trajectory index under ``stream_prefix``)."""
    if len(initial_conditions) == 0:
        raise ConfigurationError("at least one initial condition is required")
    return [
        simulate(sys, x0, None, steps, noise, stream_ids=(*stream_prefix, i), x_box=x_box)
        for i, x0 in enumerate(initial_conditions)
    ]
