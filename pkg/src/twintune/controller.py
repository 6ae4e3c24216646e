"""Parametrizable tracking policies.

The NMPC penalizes the error vector ``(vx - v_ref, vy, r, w, theta_dev, delta,
throttle)`` with ``diag(q)`` and the rates ``(delta_rate, throttle_rate)``
with ``diag(r)``; path progress ``s`` is never penalized. Together the two
diagonals form the 9 tunable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .plant import ControlRates, PathGeometry, PlantParams, PlantState, eval_path

__all__ = [
    "N_Q",
    "N_R",
    "N_THETA",
    "IndefiniteWeightsError",
    "ControllerParams",
    "OcpConfig",
    "PolicyResult",
    "assemble_weights",
    "solve_ocp",
    "stage_cost",
    "NmpcPolicy",
    "PidMemory",
    "pid_policy",
]

N_Q = 7
N_R = 2
N_THETA = N_Q + N_R

STATE_NAMES = ("vx", "vy", "r", "s", "w", "theta_dev", "delta", "throttle")


class IndefiniteWeightsError(ValueError):
    pass


@dataclass(frozen=True)
class ControllerParams:
    """Diagonal cost weights; ``theta = [q, r]``."""

    q: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        r = np.array(self.r, dtype=float).reshape(-1)
        if q.size != N_Q or r.size != N_R:
            raise ValueError(f"need {N_Q} state weights and {N_R} input weights")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)

    @classmethod
    def from_theta(cls, theta) -> "ControllerParams":
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != N_THETA:
            raise ValueError(f"theta must have {N_THETA} entries, got {theta.size}")
        return cls(theta[:N_Q], theta[N_Q:])

    @classmethod
    def unity(cls) -> "ControllerParams":
        return cls(np.ones(N_Q), np.ones(N_R))

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.q, self.r])

    def check(self):
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.r))):
            raise IndefiniteWeightsError("weights must be finite")
        if np.any(self.q < 0):
            raise IndefiniteWeightsError(f"state weights must be >= 0, got {self.q}")
        if np.any(self.r <= 0):
            raise IndefiniteWeightsError(f"input weights must be > 0, got {self.r}")


def assemble_weights(theta: ControllerParams) -> tuple[np.ndarray, np.ndarray]:
    theta.check()
    return np.diag(theta.q), np.diag(theta.r)


def _default_state_lo():
    return (0.0, -3.0, -2.0, -1e6, -1e6, -1.2, -0.55, -1.0)


def _default_state_hi():
    return (8.0, 3.0, 2.0, 1e6, 1e6, 1.2, 0.55, 1.0)


@dataclass(frozen=True)
class OcpConfig:
    """Shooting problem setup.

    The ``w`` entry of the state box is intersected with the path's lane tube
    at solve time. ``model`` is the prediction model used inside the solver.
    """

    horizon: float = 3.0
    steps: int = 30
    state_lo: tuple = field(default_factory=_default_state_lo)
    state_hi: tuple = field(default_factory=_default_state_hi)
    input_lo: tuple = (-0.6, -1.5)
    input_hi: tuple = (0.6, 1.5)
    sqp_iters: int = 1
    warm_start: bool = True
    penalty: float = 1e3
    model: PlantParams = field(default_factory=PlantParams)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if int(self.steps) != self.steps or self.steps < 2:
            raise ValueError("steps must be an integer >= 2")
        if int(self.sqp_iters) != self.sqp_iters or self.sqp_iters < 1:
            raise ValueError("sqp_iters must be an integer >= 1")
        if len(self.state_lo) != K.NX or len(self.state_hi) != K.NX:
            raise ValueError(f"state bounds need {K.NX} entries")
        if len(self.input_lo) != K.NU or len(self.input_hi) != K.NU:
            raise ValueError(f"input bounds need {K.NU} entries")
        if any(lo >= hi for lo, hi in zip(self.state_lo, self.state_hi)):
            raise ValueError("every state bound needs min < max")
        if any(lo >= hi for lo, hi in zip(self.input_lo, self.input_hi)):
            raise ValueError("every input bound needs min < max")
        if self.penalty < 0:
            raise ValueError("penalty must be >= 0")

    @property
    def dt_h(self) -> float:
        return self.horizon / self.steps

    def bounds(self, path: PathGeometry):
        xlo = np.array(self.state_lo, dtype=float)
        xhi = np.array(self.state_hi, dtype=float)
        xlo[K.W] = max(xlo[K.W], path.w_l)
        xhi[K.W] = min(xhi[K.W], path.w_r)
        return xlo, xhi, np.array(self.input_lo, dtype=float), np.array(self.input_hi, dtype=float)


@dataclass
class PolicyResult:
    first_action: ControlRates
    optimal_cost: float
    trajectory: np.ndarray
    inputs: np.ndarray
    solver_status: str
    objective_trace: np.ndarray

    @property
    def ok(self) -> bool:
        return self.solver_status == "ok"


def _path_arrays(path: PathGeometry):
    return path.arc_samples, path.curvature, path.speed_profile


def solve_ocp(x0: PlantState, path: PathGeometry, theta: ControllerParams, cfg: OcpConfig,
              prev=None) -> PolicyResult:
    """One receding-horizon solve; ``prev`` is an optional (N_H, 2) input guess."""
    theta.check()
    x = x0.as_array()
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state must be finite")
    U = np.zeros((cfg.steps, K.NU)) if prev is None else np.array(prev, dtype=float, copy=True)
    if U.shape != (cfg.steps, K.NU):
        raise ValueError(f"warm start must have shape {(cfg.steps, K.NU)}")
    X = np.empty((cfg.steps + 1, K.NX))
    trace = np.empty(cfg.sqp_iters + 1)
    xlo, xhi, ulo, uhi = cfg.bounds(path)
    ps, pk, pv = _path_arrays(path)
    p = cfg.model.as_array(path.grade)
    J, status = K.ocp_solve(x, U, theta.q, theta.r, p, ps, pk, pv, xlo, xhi, ulo, uhi,
                            cfg.dt_h, cfg.sqp_iters, cfg.penalty, X, trace)
    if status != 0:
        return PolicyResult(ControlRates(), float("nan"), X, U, "failed", trace)
    return PolicyResult(ControlRates(float(U[0, 0]), float(U[0, 1])), float(J), X, U, "ok", trace)


def stage_cost(X: np.ndarray, U: np.ndarray, path: PathGeometry, theta: ControllerParams, dt_h: float) -> float:
    """Plain re-evaluation of the tracking cost along a predicted trajectory."""
    total = 0.0
    for k in range(U.shape[0]):
        xk = X[k + 1]
        v_ref = float(np.interp(min(max(xk[K.S], 0.0), path.total_length), path.arc_samples, path.speed_profile))
        err = xk[K.ERR_STATE].copy()
        err[0] = xk[K.VX] - v_ref
        total += dt_h * (float(err @ (theta.q * err)) + float(U[k] @ (theta.r * U[k])))
    return total


class NmpcPolicy:
    """Stateful receding-horizon controller owning its warm-start buffer."""

    def __init__(self, theta: ControllerParams, cfg: OcpConfig, path: PathGeometry, dt: float):
        theta.check()
        self.theta = theta
        self.cfg = cfg
        self.path = path
        self.dt = dt
        self._plan = None
        self._last = (ControlRates(), 0.0)

    def reset(self):
        self._plan = None
        self._last = (ControlRates(), 0.0)

    def _shifted_plan(self):
        if self._plan is None or not self.cfg.warm_start:
            return None
        n = self.cfg.steps
        t = np.arange(n) + self.dt / self.cfg.dt_h
        grid = np.arange(n)
        return np.column_stack([np.interp(t, grid, self._plan[:, j]) for j in range(K.NU)])

    def __call__(self, x: PlantState) -> PolicyResult:
        res = solve_ocp(x, self.path, self.theta, self.cfg, self._shifted_plan())
        if res.ok:
            self._plan = res.inputs
            self._last = (res.first_action, res.optimal_cost)
        else:
            self._plan = None
            res.first_action, res.optimal_cost = self._last
        return res


@dataclass
class PidMemory:
    integral: np.ndarray = field(default_factory=lambda: np.zeros(2))
    prev_error: np.ndarray | None = None


def pid_policy(x: PlantState, gains, path: PathGeometry, memory: PidMemory | None = None,
               dt: float = 0.05, input_lo=(-0.6, -1.5), input_hi=(0.6, 1.5)) -> ControlRates:
    """Two decoupled PIDs: lateral offset to steering rate, speed error to throttle rate.

    ``gains = (Kp_lat, Ki_lat, Kd_lat, Kp_lon, Ki_lon, Kd_lon)``; passing a
    ``PidMemory`` makes the integral and derivative terms persistent.
    """
    g = np.asarray(gains, dtype=float)
    if g.shape != (6,) or not np.all(np.isfinite(g)):
        raise ValueError("gains must be 6 finite numbers")
    mem = memory if memory is not None else PidMemory()
    _, _, _, v_ref = eval_path(path, x.s)
    err = np.array([x.w, x.vx - v_ref])
    mem.integral = mem.integral + err * dt
    d_err = np.zeros(2) if mem.prev_error is None else (err - mem.prev_error) / dt
    mem.prev_error = err
    u = -(g[[0, 3]] * err + g[[1, 4]] * mem.integral + g[[2, 5]] * d_err)
    u = np.clip(u, input_lo, input_hi)
    return ControlRates(float(u[0]), float(u[1]))

