"""Cheap analytic stand-ins for the rollout oracle.

They implement the same ``evaluate(k, requests)`` protocol as the vehicle
problem, so every tuner mode can be benchmarked on surfaces with a known
optimum in milliseconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .executor import derive_seed


@dataclass
class SyntheticOutcome:
    y: np.ndarray
    completed: bool = True
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def kpi(self) -> float:
        return 0.5 * float(self.y @ self.y)

    @property
    def loss(self) -> float:
        return float(self.y @ self.y)


class SyntheticProblem:
    """Base class: subclasses define ``response(theta)``.

    ``noise_std`` perturbs every rollout except the nominal-twin safety runs,
    which are deterministic functions of theta (fixed seed, as for the vehicle).
    ``spsa+`` / ``spsa-`` share one noise draw.
    """

    n_out = 3

    def __init__(self, noise_std: float = 0.0, seed: int = 0, target_noise_std: float | None = None):
        self.noise_std = float(noise_std)
        self.target_noise_std = self.noise_std if target_noise_std is None else float(target_noise_std)
        self.seed = int(seed)
        self.calls = 0

    def response(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diverges(self, theta: np.ndarray) -> bool:
        return False

    def _noise(self, k, req):
        std = self.target_noise_std if req.kind == "target" else self.noise_std
        if req.kind == "safety" or std == 0.0:
            return np.zeros(self.n_out)
        kind = "spsa" if req.kind.startswith("spsa") else req.kind
        rng = np.random.default_rng(derive_seed(self.seed, k, req.j, kind))
        return std * rng.standard_normal(self.n_out)

    def evaluate(self, k, requests):
        out = []
        for req in requests:
            self.calls += 1
            theta = np.asarray(req.theta, dtype=float)
            y = np.asarray(self.response(theta), dtype=float) + self._noise(k, req)
            out.append(SyntheticOutcome(y, completed=not self.diverges(theta)))
        return out

    def kpi(self, theta) -> float:
        y = np.asarray(self.response(np.asarray(theta, dtype=float)))
        return 0.5 * float(y @ y)


class AffineProblem(SyntheticProblem):
    """``y = M theta + b`` plus optional gaussian noise."""

    def __init__(self, M, b, **kw):
        super().__init__(**kw)
        self.M = np.atleast_2d(np.asarray(M, dtype=float))
        self.b = np.asarray(b, dtype=float).reshape(-1)
        self.n_out = self.M.shape[0]

    @classmethod
    def around(cls, M, theta_star, **kw) -> "AffineProblem":
        """``y = M (theta - theta_star)``: zero output exactly at ``theta_star``."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return cls(M, -M @ np.asarray(theta_star, dtype=float), **kw)

    def response(self, theta):
        return self.M @ theta + self.b


class BimodalProblem(SyntheticProblem):
    """Two-parameter surface with a shallow and a deep basin.

    Coordinates are a scaled ``(Q_w, Q_vx)`` pair, ``t1 = Q_w / 100`` and
    ``t2 = 2 Q_vx``, so :attr:`START` corresponds to ``Q_w = 300, Q_vx = 3``.
    Along the first axis the
    residual ``(t1 - a)(t1 - b) / 4`` vanishes at both ``a`` and ``b``; a weak
    linear residual tilts the landscape so only ``b`` is a true zero. The
    third output pulls the second coordinate towards ``t2_star``; the tilt
    residual is the natural safety metric (``cost_index=1``).
    """

    START = (3.0, 6.0)

    def __init__(self, shallow=3.0, deep=7.0, tilt=0.3, t2_star=6.0, t2_gain=0.5, **kw):
        super().__init__(**kw)
        self.shallow = float(shallow)
        self.deep = float(deep)
        self.tilt = float(tilt)
        self.t2_star = float(t2_star)
        self.t2_gain = float(t2_gain)

    @property
    def barrier(self) -> float:
        """Location of the ridge between the basins (local maximum of the KPI along t1)."""
        t1 = np.linspace(self.shallow, self.deep, 4001)
        f = [self.kpi(np.array([t, self.t2_star])) for t in t1]
        return float(t1[int(np.argmax(f))])

    @property
    def optimum(self) -> np.ndarray:
        return np.array([self.deep, self.t2_star])

    def response(self, theta):
        t1, t2 = theta[0], theta[1]
        return np.array([
            (t1 - self.shallow) * (t1 - self.deep) / 4.0,
            self.tilt * (t1 - self.deep),
            self.t2_gain * (t2 - self.t2_star),
        ])

    def in_deep_basin(self, theta) -> bool:
        return bool(theta[0] > self.barrier)
