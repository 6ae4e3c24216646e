"""Closed-loop rollouts and their performance metrics.

A rollout runs the policy against one plant instance for ``N_T = T / dt``
samples and records three output series: the speed error ``vx - v_ref``, the
lateral offset ``w`` and the solver cost ``J*``. References for all three are
zero, so the stacked error vector is simply the concatenated series.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .controller import ControllerParams, OcpConfig
from .plant import PathGeometry, PlantParams, PlantState

__all__ = [
    "RolloutConfig",
    "PerformanceRecord",
    "run_oracle",
    "stack_performance",
    "rms_metrics",
    "kpi",
    "write_trace",
]

CONTROLLERS = ("nmpc", "pid")


@dataclass(frozen=True)
class RolloutConfig:
    """One closed-loop episode.

    ``initial_state`` defaults to standing still at the start of the path;
    ``initial_offset`` adds a concrete ``(w, theta_dev)`` perturbation on top.
    ``output_scale`` multiplies the (path, velocity, cost) series before they
    enter V.
    """

    T: float = 85.0
    dt: float = 0.05
    seed: int = 0
    input_noise_std: tuple = (0.0, 0.0)
    output_noise_std: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    initial_state: PlantState | None = None
    initial_offset: tuple = (0.0, 0.0)
    controller: str = "nmpc"
    ocp: OcpConfig = field(default_factory=OcpConfig)
    output_scale: tuple = (1.0, 1.0, 1.0)
    keep_trace: bool = False

    def __post_init__(self):
        if not self.T > 0 or not self.dt > 0:
            raise ValueError("T and dt must be positive")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"T/dt = {ratio!r} is not an integer")
        if len(self.input_noise_std) != 2 or len(self.output_noise_std) != 5:
            raise ValueError("need 2 input and 5 output noise stds")
        if min(self.input_noise_std) < 0 or min(self.output_noise_std) < 0:
            raise ValueError("noise stds must be >= 0")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if len(self.output_scale) != 3 or min(self.output_scale) <= 0:
            raise ValueError("output_scale needs 3 positive entries")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class PerformanceRecord:
    y_path: np.ndarray
    y_velocity: np.ndarray
    y_cost: np.ndarray
    completed: bool
    n_completed: int = 0
    error: str | None = None
    states: np.ndarray | None = None
    inputs: np.ndarray | None = None

    @property
    def n_t(self) -> int:
        return int(self.y_path.size)

    @property
    def failed(self) -> bool:
        """True when the job raised instead of producing data."""
        return self.error is not None

    @property
    def V(self) -> np.ndarray:
        return stack_performance(self)

    @property
    def H(self) -> tuple[float, float, float]:
        return rms_metrics(self)

    @property
    def H_path(self) -> float:
        return self.H[0]

    @property
    def H_velocity(self) -> float:
        return self.H[1]

    @property
    def H_cost(self) -> float:
        return self.H[2]

    @property
    def y(self) -> np.ndarray:
        """Reduced output (H_path, H_velocity, H_cost)."""
        return np.array(self.H)

    @property
    def kpi(self) -> float:
        return kpi(self.V)

    @property
    def loss(self) -> float:
        """Squared norm of the reduced output."""
        return float(self.y @ self.y)

    @classmethod
    def failure(cls, message: str) -> "PerformanceRecord":
        empty = np.zeros(0)
        return cls(empty, empty, empty, completed=False, error=message)


def stack_performance(record: PerformanceRecord) -> np.ndarray:
    return np.concatenate([record.y_path, record.y_velocity, record.y_cost])


def rms_metrics(record: PerformanceRecord) -> tuple[float, float, float]:
    if record.n_t == 0:
        raise ValueError("record has no samples")
    return tuple(float(np.sqrt(np.mean(np.square(y)))) for y in (record.y_path, record.y_velocity, record.y_cost))


def kpi(V) -> float:
    V = np.asarray(V, dtype=float)
    if V.size % 3:
        raise ValueError("V length must be a multiple of 3")
    n_t = V.size // 3
    return float(V @ V) / (2.0 * n_t)


def _initial_state(path: PathGeometry, cfg: RolloutConfig) -> np.ndarray:
    x0 = (cfg.initial_state or PlantState()).as_array()
    x0[K.W] += cfg.initial_offset[0]
    x0[K.TH] += cfg.initial_offset[1]
    return x0


def run_oracle(theta, plant: PlantParams, path: PathGeometry, cfg: RolloutConfig) -> PerformanceRecord:
    """Simulate one closed-loop episode.

    ``theta`` is a ControllerParams (or a flat 9-vector) for the NMPC, or the six
    PID gains when ``cfg.controller == "pid"``.
    """
    n = cfg.n_steps
    if cfg.controller == "nmpc":
        if not isinstance(theta, ControllerParams):
            theta = ControllerParams.from_theta(theta)
        theta.check()
        q, rw = theta.q, theta.r
        gains = np.zeros(6)
        kind = K.CTRL_NMPC
    else:
        gains = np.asarray(theta, dtype=float).reshape(-1)
        if gains.size != 6 or not np.all(np.isfinite(gains)):
            raise ValueError("PID rollouts need 6 finite gains")
        q, rw = np.zeros(K.NE), np.ones(K.NU)
        kind = K.CTRL_PID

    rng = np.random.default_rng(cfg.seed)
    noise_in = rng.standard_normal((n, 2)) * np.asarray(cfg.input_noise_std)
    noise_out = rng.standard_normal((n, 5)) * np.asarray(cfg.output_noise_std)

    ocp = cfg.ocp
    xlo, xhi, ulo, uhi = ocp.bounds(path)
    ps, pk, pv = path.arc_samples, path.curvature, path.speed_profile
    out_y = np.empty((n, 3))
    out_x = np.empty((n, K.NX))
    out_u = np.empty((n, K.NU))
    out_J = np.empty(n)
    done = K.closed_loop(
        kind, gains, q, rw,
        ocp.model.as_array(path.grade), plant.as_array(path.grade), int(plant.actuator_delay_steps),
        ps, pk, pv, path.tube_halfwidth, _initial_state(path, cfg), n, cfg.dt,
        noise_in, noise_out,
        ocp.steps, ocp.dt_h, ocp.sqp_iters, ocp.warm_start, ocp.penalty, xlo, xhi, ulo, uhi,
        out_y, out_x, out_u, out_J,
    )
    sp, sv, sc = cfg.output_scale
    return PerformanceRecord(
        y_path=sp * out_y[:, 1],
        y_velocity=sv * out_y[:, 0],
        y_cost=sc * out_y[:, 2],
        completed=bool(done == n),
        n_completed=int(done),
        states=out_x if cfg.keep_trace else None,
        inputs=out_u if cfg.keep_trace else None,
    )


def write_trace(record: PerformanceRecord, dt: float, dest=None) -> str:
    """CSV dump ``t,vx,vy,r,s,w,theta_dev,delta,throttle,J,u1,u2`` of a traced rollout."""
    if record.states is None or record.inputs is None:
        raise ValueError("rollout was run without keep_trace")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "vx", "vy", "r", "s", "w", "theta_dev", "delta", "throttle", "J", "u1", "u2"])
    for i in range(record.n_t):
        w.writerow([repr(i * dt), *map(repr, record.states[i].tolist()), repr(float(record.y_cost[i])),
                    *map(repr, record.inputs[i].tolist())])
    text = buf.getvalue()
    if dest is not None:
        Path(dest).write_text(text)
    return text

