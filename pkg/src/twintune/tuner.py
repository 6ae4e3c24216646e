"""Adaptive unscented Kalman / SPSA parameter tuner.

Each iteration spreads ``2n + 1`` sigma points around the current parameter
mean, evaluates them on randomized twins, and pushes the resulting output
statistics through a Kalman update that steers the target-system outputs
towards zero. A simultaneous-perturbation gradient step on ``L = |y|^2`` is
blended in, the noise covariances are re-estimated with a forgetting factor,
and a nominal-twin rollout vetoes candidates that inflate the controller cost.

The tuner is agnostic to what a rollout is. It talks to a *problem* object::

    problem.evaluate(k, requests) -> list of outcomes

where each request is a :class:`Request` and each outcome exposes ``y``
(reduced output vector), ``kpi``, ``completed`` and ``failed``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .executor import derive_seed

log = logging.getLogger(__name__)

MODES = ("auks", "const", "ukf", "spsa")
# mode -> (adapt covariances, UKF share of the fused step; None = hp.fusion_w)
MODE_TABLE = {
    "auks": (True, None),
    "const": (False, None),
    "ukf": (False, 1.0),
    "spsa": (True, 0.0),
}

PSD_TOL = 1e-10
COND_LIMIT = 1e12
ZERO_PERTURBATION = 1e-12


class TunerError(RuntimeError):
    pass


class CholeskyFailure(TunerError):
    pass


class DegenerateBoundsError(TunerError):
    pass


class DimensionMismatch(TunerError):
    pass


class SingularInnovation(TunerError):
    pass


class ZeroPerturbation(TunerError):
    pass


class RolloutFailure(TunerError):
    pass


@dataclass(frozen=True)
class TunerHyperparams:
    theta_min: np.ndarray
    theta_max: np.ndarray
    lambda_ut: float | None = None
    fusion_w: float = 0.5
    alpha: float = 0.95
    a0: float = 1.0
    safety_margin: float = 0.1
    mode: str = "auks"
    # whether the "ukf" mode adapts its covariances (off reproduces the constant baseline)
    adapt_override: bool | None = None
    safety_check: bool = True
    # position of the controller-cost metric inside the reduced output
    cost_index: int = 2
    # candidates are projected this fraction of the box width inside C_theta, so a
    # mean can never sit exactly on a bound (where the sigma scale would be zero)
    interior_margin: float = 0.0

    def __post_init__(self):
        lo = np.array(self.theta_min, dtype=float).reshape(-1)
        hi = np.array(self.theta_max, dtype=float).reshape(-1)
        object.__setattr__(self, "theta_min", lo)
        object.__setattr__(self, "theta_max", hi)
        if lo.shape != hi.shape or lo.size == 0:
            raise ValueError("theta_min and theta_max must be equal-length vectors")
        if np.any(lo <= 0) or np.any(lo >= hi):
            raise ValueError("need 0 < theta_min < theta_max elementwise")
        if self.lambda_ut is None:
            object.__setattr__(self, "lambda_ut", 3.0 - lo.size)
        if not self.n_theta + self.lambda_ut > 0:
            raise ValueError("n_theta + lambda must be positive")
        if not 0.0 <= self.fusion_w <= 1.0:
            raise ValueError("fusion_w must lie in [0, 1]")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if not self.a0 > 0:
            raise ValueError("a0 must be positive")
        if not self.safety_margin >= 0:
            raise ValueError("safety_margin must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 <= self.interior_margin < 0.5:
            raise ValueError("interior_margin must lie in [0, 0.5)")

    @property
    def n_theta(self) -> int:
        return int(self.theta_min.size)

    @property
    def c0(self) -> float:
        return float(np.sqrt(self.n_theta + self.lambda_ut))

    @property
    def adaptive(self) -> bool:
        adapt, _ = MODE_TABLE[self.mode]
        if self.mode == "ukf" and self.adapt_override is not None:
            return bool(self.adapt_override)
        return adapt

    @property
    def w_eff(self) -> float:
        _, w = MODE_TABLE[self.mode]
        return self.fusion_w if w is None else w

    def in_bounds(self, theta) -> bool:
        theta = np.asarray(theta)
        return bool(np.all(theta >= self.theta_min) and np.all(theta <= self.theta_max))


@dataclass
class ParameterBelief:
    theta: np.ndarray
    P: np.ndarray
    C_dtheta: np.ndarray
    C_v: np.ndarray
    k: int = 1
    a_k: float = 1.0
    # nominal-twin record of the current mean: (theta bytes, outcome)
    safety_reference: tuple | None = field(default=None, compare=False, repr=False)

    @classmethod
    def initial(cls, theta0, hp: TunerHyperparams, n_out: int = 3, P0=1.0, C_dtheta0=1.0, C_v0=1.0):
        n = hp.n_theta
        theta0 = np.array(theta0, dtype=float).reshape(-1)
        if theta0.size != n:
            raise DimensionMismatch(f"theta0 has {theta0.size} entries, bounds have {n}")
        return cls(theta0, P0 * np.eye(n), C_dtheta0 * np.eye(n), C_v0 * np.eye(n_out), k=1, a_k=hp.a0)

    def copy(self) -> "ParameterBelief":
        return replace(self, theta=self.theta.copy(), P=self.P.copy(), C_dtheta=self.C_dtheta.copy(),
                       C_v=self.C_v.copy())


@dataclass
class SigmaSet:
    points: np.ndarray          # (n, 2n + 1)
    weights: np.ndarray         # (2n + 1,)
    c_k: float
    chol: np.ndarray
    spsa_pair: np.ndarray       # (n, 2): columns theta + p, theta - p
    spsa_delta: np.ndarray      # (n,) in {-1, +1}
    spsa_perturbation: np.ndarray  # p


@dataclass
class Moments:
    theta_bar: np.ndarray
    P_pred: np.ndarray
    y_bar: np.ndarray
    P_thetay: np.ndarray
    C_yy: np.ndarray
    P_yy: np.ndarray


@dataclass
class UpdateReport:
    k: int
    K: np.ndarray
    delta_ukf: np.ndarray
    delta_spsa: np.ndarray
    delta_fused: np.ndarray
    epsilon: np.ndarray
    accepted: bool
    verdict: str
    P_post: np.ndarray
    y_bar: np.ndarray
    ghat: np.ndarray
    c_k: float
    a_k: float
    candidate: np.ndarray
    theta: np.ndarray
    target_y: np.ndarray
    target_kpi: float
    sigma_y: np.ndarray
    safety_ratio: float


@dataclass(frozen=True)
class Request:
    kind: str
    j: int
    theta: np.ndarray


# --------------------------------------------------------------- linear algebra


def psd_project(M: np.ndarray) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues to zero."""
    S = 0.5 * (M + M.T)
    vals, vecs = np.linalg.eigh(S)
    if vals.min() >= 0.0:
        return S
    vals = np.clip(vals, 0.0, None)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def jittered_cholesky(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    n = P.shape[0]
    jitter = 0.0
    for attempt in range(4):
        try:
            return np.linalg.cholesky(P + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter = PSD_TOL if attempt == 0 else jitter * 10.0
    raise CholeskyFailure("covariance is not positive definite even after jitter")


def ut_weights(n: int, lam: float) -> np.ndarray:
    w = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
    w[0] = lam / (n + lam)
    return w


def _max_scale(theta, direction, lo, hi) -> float:
    """Largest c >= 0 with theta + s*c*direction inside [lo, hi] for s = +1 and -1."""
    mag = np.abs(direction)
    nz = mag > 0
    if not np.any(nz):
        return np.inf
    room = np.minimum(hi - theta, theta - lo)[nz]
    return float(np.min(np.maximum(room, 0.0) / mag[nz]))


# ----------------------------------------------------------------- operations


def generate_sigma_points(belief: ParameterBelief, hp: TunerHyperparams, seed: int) -> SigmaSet:
    theta = belief.theta
    n = hp.n_theta
    if not hp.in_bounds(theta):
        raise DegenerateBoundsError(f"mean {theta} lies outside the parameter bounds")
    A = jittered_cholesky(belief.P)
    c0 = hp.c0
    c_k = min(c0, min(_max_scale(theta, A[:, j], hp.theta_min, hp.theta_max) for j in range(n)))
    pts = np.empty((n, 2 * n + 1))
    pts[:, 0] = theta
    pts[:, 1:n + 1] = theta[:, None] + c_k * A
    pts[:, n + 1:] = theta[:, None] - c_k * A
    # keep rounding from stepping a hair outside the box
    pts = np.clip(pts, hp.theta_min[:, None], hp.theta_max[:, None])

    rng = np.random.default_rng(seed)
    delta = rng.choice(np.array([-1.0, 1.0]), size=n)
    direction = np.sqrt(np.clip(np.diag(belief.P), 0.0, None)) * delta
    c_spsa = min(c0, _max_scale(theta, direction, hp.theta_min, hp.theta_max))
    p = c_spsa * direction
    pair = np.column_stack([np.clip(theta + p, hp.theta_min, hp.theta_max),
                            np.clip(theta - p, hp.theta_min, hp.theta_max)])
    return SigmaSet(pts, ut_weights(n, hp.lambda_ut), float(c_k), A, pair, delta, p)


def unscented_moments(sigma: SigmaSet, y, belief: ParameterBelief, hp: TunerHyperparams) -> Moments:
    Y = np.asarray(y, dtype=float)
    n_pts = sigma.points.shape[1]
    if Y.ndim != 2 or Y.shape[0] != n_pts:
        raise DimensionMismatch(f"need one output row per sigma point ({n_pts}), got shape {Y.shape}")
    if belief.C_v.shape != (Y.shape[1], Y.shape[1]):
        raise DimensionMismatch(f"C_v is {belief.C_v.shape} but outputs have {Y.shape[1]} entries")
    w = sigma.weights
    Th = sigma.points
    theta_bar = Th @ w
    dT = Th - theta_bar[:, None]
    y_bar = w @ Y
    dY = Y - y_bar
    P_pred = psd_project(belief.C_dtheta + (dT * w) @ dT.T)
    P_thetay = (dT * w) @ dY
    C_yy = psd_project((dY.T * w) @ dY)
    P_yy = belief.C_v + C_yy
    return Moments(theta_bar, P_pred, y_bar, P_thetay, C_yy, P_yy)


def kalman_step(m: Moments, v_real) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gain, parameter step and posterior covariance for a measured output."""
    v = np.asarray(v_real, dtype=float).reshape(-1)
    P_yy = 0.5 * (m.P_yy + m.P_yy.T)
    if v.size != P_yy.shape[0]:
        raise DimensionMismatch("measurement and P_yy dimensions differ")
    if not np.all(np.isfinite(P_yy)) or np.linalg.cond(P_yy) > COND_LIMIT:
        P_yy = P_yy + PSD_TOL * np.eye(P_yy.shape[0])
    try:
        gain = np.linalg.solve(P_yy, m.P_thetay.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance is singular") from exc
    if not np.all(np.isfinite(gain)):
        raise SingularInnovation("innovation covariance is singular")
    delta = -gain @ v
    post = psd_project(m.P_pred - gain @ P_yy @ gain.T)
    return gain, delta, post


def spsa_step(L_plus: float, L_minus: float, sigma: SigmaSet, a_k: float) -> tuple[np.ndarray, np.ndarray]:
    p = sigma.spsa_perturbation
    if np.any(np.abs(p) < ZERO_PERTURBATION):
        raise ZeroPerturbation("SPSA perturbation vanished in at least one coordinate")
    if not (np.isfinite(L_plus) and np.isfinite(L_minus)):
        raise ValueError("SPSA losses must be finite")
    ghat = (L_plus - L_minus) / (2.0 * p)
    return ghat, -a_k * ghat


def fuse_and_update(belief: ParameterBelief, delta_ukf, delta_spsa, hp: TunerHyperparams):
    """Blend the two steps; returns (projected candidate, unprojected step)."""
    w = hp.w_eff
    step = w * np.asarray(delta_ukf) + (1.0 - w) * np.asarray(delta_spsa)
    pad = hp.interior_margin * (hp.theta_max - hp.theta_min)
    cand = np.clip(belief.theta + step, hp.theta_min + pad, hp.theta_max - pad)
    return cand, step


def schedule_step_size(belief: ParameterBelief, y0, hp: TunerHyperparams) -> float:
    if belief.k < 1:
        raise ValueError("iteration counter starts at 1")
    y0 = np.asarray(y0, dtype=float)
    return hp.a0 / (float(y0 @ y0) + belief.k ** 0.602)


def adapt_covariances(belief: ParameterBelief, delta_theta, epsilon, C_yy, hp: TunerHyperparams):
    if not hp.adaptive:
        return belief.C_dtheta, belief.C_v
    a = hp.alpha
    k2 = float(belief.k) ** 2
    d = np.asarray(delta_theta, dtype=float)
    e = np.asarray(epsilon, dtype=float)
    C_dtheta = a * belief.C_dtheta + (1.0 - a) * np.outer(d, d) / k2
    C_v = a * belief.C_v + (1.0 - a) * (C_yy + np.outer(e, e)) / k2
    return C_dtheta, C_v


@dataclass
class SafetyVerdict:
    accepted: bool
    clause: str
    ratio: float


def safety_check(candidate_record, current_record, theta_candidate, hp: TunerHyperparams) -> SafetyVerdict:
    """Accept when the nominal-twin rollout completed, stayed in bounds and kept its cost."""
    if candidate_record.failed or not candidate_record.completed:
        return SafetyVerdict(False, "unstable", float("inf"))
    if not hp.in_bounds(theta_candidate):
        return SafetyVerdict(False, "bounds", float("nan"))
    h_new = abs(float(candidate_record.y[hp.cost_index]))
    h_old = abs(float(current_record.y[hp.cost_index]))
    ratio = h_new / h_old if h_old > 0 else (1.0 if h_new == 0 else float("inf"))
    if h_new <= (1.0 + hp.safety_margin) * h_old:
        return SafetyVerdict(True, "ok", ratio)
    return SafetyVerdict(False, "cost", ratio)


# ------------------------------------------------------------------ iteration


def _check_outcomes(outcomes, requests):
    for out, req in zip(outcomes, requests):
        if out.failed:
            raise RolloutFailure(f"{req.kind} rollout {req.j} failed: {out.error}")


def tune_iteration(belief: ParameterBelief, problem, hp: TunerHyperparams, seed: int):
    """One full tuning cycle; returns (new belief, report). The input belief is never mutated."""
    b = belief.copy()
    k = b.k
    n = hp.n_theta
    w_eff = hp.w_eff
    sigma = generate_sigma_points(b, hp, derive_seed(seed, k, 0, "bernoulli"))
    use_spsa = w_eff < 1.0 and np.all(np.abs(sigma.spsa_perturbation) >= ZERO_PERTURBATION)

    requests = [Request("sigma", j, sigma.points[:, j].copy()) for j in range(2 * n + 1)]
    if use_spsa:
        requests.append(Request("spsa+", 0, sigma.spsa_pair[:, 0].copy()))
        requests.append(Request("spsa-", 0, sigma.spsa_pair[:, 1].copy()))
    requests.append(Request("target", 0, b.theta.copy()))
    outcomes = problem.evaluate(k, requests)
    _check_outcomes(outcomes, requests)

    sigma_out = outcomes[:2 * n + 1]
    Y = np.array([o.y for o in sigma_out])
    target = outcomes[-1]
    v_real = np.asarray(target.y, dtype=float)

    mom = unscented_moments(sigma, Y, b, hp)
    gain, d_ukf, P_post = kalman_step(mom, v_real)
    a_k = schedule_step_size(b, Y[0], hp)
    if use_spsa:
        ghat, d_spsa = spsa_step(outcomes[2 * n + 1].loss, outcomes[2 * n + 2].loss, sigma, a_k)
    else:
        ghat = np.zeros(n)
        d_spsa = np.zeros(n)
    cand, step = fuse_and_update(b, d_ukf, d_spsa, hp)
    epsilon = v_real - mom.y_bar

    if hp.safety_check:
        ref = b.safety_reference
        safety_requests = [Request("safety", 0, cand.copy())]
        if ref is None or ref[0] != b.theta.tobytes():
            safety_requests.append(Request("safety", 1, b.theta.copy()))
        safety_out = problem.evaluate(k, safety_requests)
        _check_outcomes(safety_out, safety_requests)
        cand_rec = safety_out[0]
        cur_rec = safety_out[1] if len(safety_out) > 1 else ref[1]
        verdict = safety_check(cand_rec, cur_rec, cand, hp)
    else:
        cand_rec = None
        cur_rec = None
        verdict = SafetyVerdict(hp.in_bounds(cand), "ok" if hp.in_bounds(cand) else "bounds", float("nan"))

    C_dtheta, C_v = adapt_covariances(b, step, epsilon, mom.C_yy, hp)

    new = b.copy()
    if verdict.accepted:
        new.theta = cand.copy()
        new.safety_reference = (cand.tobytes(), cand_rec) if cand_rec is not None else None
    else:
        new.safety_reference = (b.theta.tobytes(), cur_rec) if cur_rec is not None else None
    new.P = P_post
    new.C_dtheta = C_dtheta
    new.C_v = C_v
    new.a_k = a_k
    new.k = k + 1
    log.debug("iteration %d: kpi=%.4f accepted=%s c_k=%.3g", k, target.kpi, verdict.accepted, sigma.c_k)

    report = UpdateReport(
        k=k, K=gain, delta_ukf=d_ukf, delta_spsa=d_spsa, delta_fused=step, epsilon=epsilon,
        accepted=verdict.accepted, verdict=verdict.clause, P_post=P_post, y_bar=mom.y_bar, ghat=ghat,
        c_k=sigma.c_k, a_k=a_k, candidate=cand, theta=b.theta.copy(), target_y=v_real,
        target_kpi=float(target.kpi), sigma_y=Y, safety_ratio=verdict.ratio,
    )
    return new, report
