"""Single-track vehicle in curvilinear coordinates.

Three fidelity levels share the 8-dim state ``(vx, vy, r, s, w, theta_dev,
delta, throttle)``: a kinematic model valid down to standstill, a linear-tyre
dynamic model, and a fused model blending the two with a smoothstep in
``vx``. Each step is one explicit RK4 step with a constant curvature, followed
by steering/throttle saturation and a no-reverse clamp on ``vx``.

The lateral offset ``w`` and heading error follow the usual Frenet
convention (``w`` grows when heading into positive ``theta_dev``); the lane
tube is the box ``w_l <= w <= w_r``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import _kernels as K

__all__ = [
    "GRAVITY",
    "PathGeometry",
    "PlantState",
    "ControlRates",
    "PlantParams",
    "DomainRandomizationSpec",
    "SingularGeometryError",
    "StandstillError",
    "InvalidSpecError",
    "eval_path",
    "blend_weight",
    "derivative",
    "step_kinematic",
    "step_dynamic",
    "step_fused",
    "sample_plant",
    "load_path",
    "save_path",
    "straight_path",
]

GRAVITY = K.GRAVITY
STANDSTILL_SPEED = 0.1


class SingularGeometryError(ValueError):
    """The vehicle sits at the centre of curvature (1 - w*kappa ~ 0)."""


class StandstillError(ValueError):
    """The dynamic single-track model is undefined at (near) zero speed."""


class InvalidSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PathGeometry:
    """Arc-length parameterized reference: curvature, lane tube, speed profile."""

    arc_samples: np.ndarray
    curvature: np.ndarray
    speed_profile: np.ndarray
    w_l: float = -1.5
    w_r: float = 1.5
    name: str = "path"
    # extra road slope added to the plant's own grade while driving this path
    grade: float = 0.0

    def __post_init__(self):
        s = np.ascontiguousarray(self.arc_samples, dtype=float)
        k = np.ascontiguousarray(self.curvature, dtype=float)
        v = np.ascontiguousarray(self.speed_profile, dtype=float)
        object.__setattr__(self, "arc_samples", s)
        object.__setattr__(self, "curvature", k)
        object.__setattr__(self, "speed_profile", v)
        if s.ndim != 1 or s.size < 2:
            raise ValueError("arc_samples needs at least two points")
        if k.shape != s.shape or v.shape != s.shape:
            raise ValueError("curvature and speed_profile must match arc_samples")
        if s[0] != 0.0 or np.any(np.diff(s) <= 0):
            raise ValueError("arc_samples must start at 0 and be strictly increasing")
        if not np.all(np.isfinite(k)):
            raise ValueError("curvature must be finite")
        if np.any(v < 0) or v[-1] != 0.0:
            raise ValueError("speed_profile must be >= 0 and end at rest")
        if not self.w_l < self.w_r:
            raise ValueError(f"empty lane tube: w_l={self.w_l} >= w_r={self.w_r}")

    @property
    def total_length(self) -> float:
        return float(self.arc_samples[-1])

    @property
    def tube_halfwidth(self) -> float:
        return max(abs(self.w_l), abs(self.w_r))


@dataclass(frozen=True)
class PlantState:
    vx: float = 0.0
    vy: float = 0.0
    r: float = 0.0
    s: float = 0.0
    w: float = 0.0
    theta_dev: float = 0.0
    delta: float = 0.0
    throttle: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    @classmethod
    def from_array(cls, a) -> "PlantState":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class ControlRates:
    delta_rate: float = 0.0
    throttle_rate: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_rate, self.throttle_rate], dtype=float)


@dataclass(frozen=True)
class PlantParams:
    """Physical parameters of one vehicle instance."""

    mass: float = 650.0
    yaw_inertia: float = 900.0
    lf: float = 1.0
    lr: float = 1.2
    Cf: float = 12000.0
    Cr: float = 12000.0
    drive_gain: float = 2000.0
    drag_coeff: float = 0.4
    road_grade: float = 0.0
    actuator_delay_steps: int = 0
    blend_lo: float = 0.5
    blend_hi: float = 2.0
    max_steer: float = 0.6

    def __post_init__(self):
        for name in ("mass", "yaw_inertia", "Cf", "Cr", "drive_gain", "lf", "lr", "max_steer"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PlantParams.{name} must be positive, got {getattr(self, name)!r}")
        if self.drag_coeff < 0:
            raise ValueError("PlantParams.drag_coeff must be >= 0")
        if not 0 <= self.blend_lo < self.blend_hi:
            raise ValueError("need 0 <= blend_lo < blend_hi")
        if int(self.actuator_delay_steps) != self.actuator_delay_steps or self.actuator_delay_steps < 0:
            raise ValueError("actuator_delay_steps must be a non-negative integer")

    def as_array(self, extra_grade: float = 0.0) -> np.ndarray:
        a = np.empty(K.NP)
        a[K.MASS] = self.mass
        a[K.IZ] = self.yaw_inertia
        a[K.LF] = self.lf
        a[K.LR] = self.lr
        a[K.CF] = self.Cf
        a[K.CR] = self.Cr
        a[K.GAIN] = self.drive_gain
        a[K.DRAG] = self.drag_coeff
        a[K.GRADE] = self.road_grade + extra_grade
        a[K.BLEND_LO] = self.blend_lo
        a[K.BLEND_HI] = self.blend_hi
        a[K.MAX_STEER] = self.max_steer
        return a

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# parameters that domain randomization is allowed to scale
RANDOMIZABLE = ("mass", "yaw_inertia", "lf", "lr", "Cf", "Cr", "drive_gain", "drag_coeff", "road_grade")


@dataclass(frozen=True)
class DomainRandomizationSpec:
    """Perturbation model for the twin population.

    ``ranges`` maps a PlantParams field to a fraction f: the field is drawn
    uniformly from ``nominal * [1 - f, 1 + f]``. Noise stds are per channel:
    inputs ``(delta_rate, throttle_rate)``, outputs ``(w, vx, vy, r, theta_dev)``.
    """

    ranges: dict = field(default_factory=dict)
    input_noise_std: tuple = (0.0, 0.0)
    output_noise_std: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    path_pool: tuple = ()
    initial_offset_std: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name, frac in self.ranges.items():
            if name not in RANDOMIZABLE:
                raise InvalidSpecError(f"cannot randomize {name!r}")
            if not frac >= 0:
                raise InvalidSpecError(f"range for {name!r} must be >= 0")
            if name != "road_grade" and frac >= 1.0:
                raise InvalidSpecError(f"range {frac} for {name!r} can make it non-positive")
        if len(self.input_noise_std) != 2 or len(self.output_noise_std) != 5:
            raise InvalidSpecError("noise stds need 2 input and 5 output channels")
        if len(self.initial_offset_std) != 2:
            raise InvalidSpecError("initial_offset_std is (w, theta_dev)")
        if min(self.input_noise_std) < 0 or min(self.output_noise_std) < 0 or min(self.initial_offset_std) < 0:
            raise InvalidSpecError("noise stds must be >= 0")


def eval_path(path: PathGeometry, s: float) -> tuple[float, float, float, float]:
    """Curvature, tube bounds and reference speed at arc length ``s`` (clamped)."""
    s = min(max(float(s), 0.0), path.total_length)
    kappa = float(np.interp(s, path.arc_samples, path.curvature))
    v_ref = float(np.interp(s, path.arc_samples, path.speed_profile))
    return kappa, path.w_l, path.w_r, v_ref


def blend_weight(vx: float, p: PlantParams) -> float:
    return K.blend_weight(vx, p.blend_lo, p.blend_hi)


def _check_geometry(x: PlantState, kappa: float):
    if abs(1.0 - x.w * kappa) < K.SINGULAR_TOL:
        raise SingularGeometryError(f"w*kappa = {x.w * kappa!r}: vehicle at the curvature centre")


_MODELS = {"kinematic": K.KINEMATIC, "dynamic": K.DYNAMIC, "fused": K.FUSED}


def derivative(model: str, x: PlantState, u: ControlRates, p: PlantParams, kappa: float) -> np.ndarray:
    """Continuous-time state derivative of the chosen model (no saturation)."""
    out = np.empty(K.NX)
    K.deriv(x.as_array(), u.as_array(), p.as_array(), float(kappa), _MODELS[model], out, np.empty(K.NX))
    return out


def _step(model: int, x: PlantState, u: ControlRates, p: PlantParams, kappa: float, dt: float) -> PlantState:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    _check_geometry(x, kappa)
    out = np.empty(K.NX)
    K.rk4(x.as_array(), u.as_array(), p.as_array(), float(kappa), float(dt), model, out, np.empty((6, K.NX)))
    if not np.all(np.isfinite(out)):
        raise SingularGeometryError("step crossed the curvature centre")
    return PlantState.from_array(out)


def step_kinematic(x: PlantState, u: ControlRates, p: PlantParams, kappa: float, dt: float) -> PlantState:
    return _step(K.KINEMATIC, x, u, p, kappa, dt)


def step_dynamic(x: PlantState, u: ControlRates, p: PlantParams, kappa: float, dt: float) -> PlantState:
    if x.vx < STANDSTILL_SPEED:
        raise StandstillError(f"dynamic model needs vx >= {STANDSTILL_SPEED} m/s, got {x.vx!r}")
    return _step(K.DYNAMIC, x, u, p, kappa, dt)


def step_fused(x: PlantState, u: ControlRates, p: PlantParams, kappa: float, dt: float) -> PlantState:
    """RK4 step of lambda(vx) * f_dyn + (1 - lambda(vx)) * f_kin."""
    return _step(K.FUSED, x, u, p, kappa, dt)


def sample_plant(dr: DomainRandomizationSpec, nominal: PlantParams, seed: int) -> PlantParams:
    """Draw one randomized plant; a pure function of ``seed``."""
    rng = np.random.default_rng(seed)
    changes = {}
    # fixed iteration order keeps draws stable regardless of dict ordering
    for name in RANDOMIZABLE:
        frac = dr.ranges.get(name, 0.0)
        u = rng.uniform(-1.0, 1.0)
        if frac:
            changes[name] = getattr(nominal, name) * (1.0 + frac * u)
    if not changes:
        return nominal
    return replace(nominal, **changes)


# ------------------------------------------------------------------ path I/O


def load_path(source) -> PathGeometry:
    """Read a path file: ``key=value`` metadata lines plus a ``s,kappa,v_ref`` table."""
    if isinstance(source, (str, Path)) and Path(source).exists():
        text = Path(source).read_text()
        default_name = Path(source).stem
    else:
        text = str(source)
        default_name = "path"
    meta = {}
    rows = []
    header_seen = False
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line and "," not in line:
            key, value = (t.strip() for t in line.split("=", 1))
            meta[key] = value
            continue
        if not header_seen:
            cols = [c.strip() for c in line.split(",")]
            if cols != ["s", "kappa", "v_ref"]:
                raise ValueError(f"expected header 's,kappa,v_ref', got {line!r}")
            header_seen = True
            continue
        rows.append([float(t) for t in line.split(",")])
    if not rows:
        raise ValueError("path file has no samples")
    data = np.asarray(rows, dtype=float)
    return PathGeometry(
        arc_samples=data[:, 0],
        curvature=data[:, 1],
        speed_profile=data[:, 2],
        w_l=float(meta.get("w_l", -1.5)),
        w_r=float(meta.get("w_r", 1.5)),
        name=meta.get("name", default_name),
        grade=float(meta.get("grade", 0.0)),
    )


def save_path(path: PathGeometry, dest=None) -> str:
    buf = io.StringIO()
    buf.write(f"name={path.name}\n")
    buf.write(f"w_l={float(path.w_l)!r}\n")
    buf.write(f"w_r={float(path.w_r)!r}\n")
    if path.grade:
        buf.write(f"grade={float(path.grade)!r}\n")
    buf.write("s,kappa,v_ref\n")
    for s, k, v in zip(path.arc_samples.tolist(), path.curvature.tolist(), path.speed_profile.tolist()):
        buf.write(f"{s!r},{k!r},{v!r}\n")
    text = buf.getvalue()
    if dest is not None:
        Path(dest).write_text(text)
    return text


def straight_path(length: float, speed: float, ds: float = 0.5, ramp: float = 5.0, **kw) -> PathGeometry:
    """Straight lane at constant speed, braking to rest over the last ``ramp`` metres."""
    s = np.arange(0.0, length + 0.5 * ds, ds)
    s[-1] = length
    v = np.minimum(speed, speed * (length - s) / ramp)
    v[-1] = 0.0
    return PathGeometry(s, np.zeros_like(s), np.clip(v, 0.0, None), **kw)

