"""Bundled synthetic path library.

Every path is built from smooth curvature bumps on a 0.5 m grid. The speed
profile respects a lateral-acceleration limit, starts at a creep speed and
brakes to rest at the end of the path.
"""

from __future__ import annotations

import numpy as np

from .plant import PathGeometry

DS = 0.5
START_SPEED = 1.0
LANE = 1.5


def bump(s, center, width, peak):
    """Raised-cosine curvature bump of total ``width`` centred at ``center``."""
    x = (s - center) / width
    out = np.zeros_like(s)
    inside = np.abs(x) < 0.5
    out[inside] = peak * 0.5 * (1.0 + np.cos(2.0 * np.pi * x[inside]))
    return out


def speed_profile(s, kappa, v_max=3.0, a_lat=1.0, a_lon=0.5, v_start=START_SPEED):
    """Curvature-limited speed with forward/backward acceleration passes and a stop at the end."""
    v = np.minimum(v_max, np.sqrt(a_lat / np.maximum(np.abs(kappa), 1e-9)))
    v[0] = min(v[0], v_start)
    v[-1] = 0.0
    ds = np.diff(s)
    for i in range(1, v.size):
        v[i] = min(v[i], np.sqrt(v[i - 1] ** 2 + 2.0 * a_lon * ds[i - 1]))
    for i in range(v.size - 2, -1, -1):
        v[i] = min(v[i], np.sqrt(v[i + 1] ** 2 + 2.0 * a_lon * ds[i]))
    return v


def _make(name, length, kappa_fn, v_max=3.0, grade=0.0, a_lat=1.0, lane=LANE):
    s = np.arange(0.0, length + 0.5 * DS, DS)
    s[-1] = length
    kappa = kappa_fn(s)
    v = speed_profile(s, kappa, v_max=v_max, a_lat=a_lat)
    return PathGeometry(s, kappa, v, w_l=-lane, w_r=lane, name=name, grade=grade)


def s_curve():
    return _make("s_curve", 180.0, lambda s: bump(s, 50.0, 40.0, 0.06) + bump(s, 110.0, 40.0, -0.06))


def straight():
    return _make("straight", 180.0, lambda s: np.zeros_like(s))


def constant_radius():
    # 25 m radius arc between short straights, entered and left through clothoid-like ramps
    def k(s):
        ramp_in = np.clip((s - 20.0) / 15.0, 0.0, 1.0)
        ramp_out = np.clip((140.0 - s) / 15.0, 0.0, 1.0)
        return 0.04 * np.minimum(ramp_in, ramp_out)

    return _make("constant_radius", 170.0, k)


def sinusoidal():
    return _make("sinusoidal", 180.0, lambda s: 0.05 * np.sin(2.0 * np.pi * s / 45.0) * np.clip((165.0 - s) / 20.0, 0.0, 1.0))


def parking_approach():
    # long straight, then a sharp right turn into the final bay
    return _make("parking_approach", 150.0,
                 lambda s: bump(s, 90.0, 20.0, -0.12) + bump(s, 125.0, 16.0, 0.1), v_max=2.5)


def uphill():
    return _make("uphill", 170.0, lambda s: bump(s, 60.0, 50.0, 0.04) + bump(s, 120.0, 40.0, -0.03), grade=0.04)


def hairpin():
    return _make("hairpin", 160.0, lambda s: bump(s, 80.0, 45.0, 0.13), v_max=2.5)


def lane_change():
    return _make("lane_change", 170.0,
                 lambda s: bump(s, 60.0, 18.0, 0.07) + bump(s, 78.0, 18.0, -0.07)
                 + bump(s, 120.0, 18.0, -0.07) + bump(s, 138.0, 18.0, 0.07))


BUNDLED = {
    "s_curve": s_curve,
    "straight": straight,
    "constant_radius": constant_radius,
    "sinusoidal": sinusoidal,
    "uphill": uphill,
    "lane_change": lane_change,
    "parking_approach": parking_approach,
    "hairpin": hairpin,
}


def bundled_path(name: str) -> PathGeometry:
    try:
        return BUNDLED[name]()
    except KeyError:
        raise KeyError(f"unknown bundled path {name!r}; choose from {sorted(BUNDLED)}") from None


def bundled_library() -> list[PathGeometry]:
    return [fn() for fn in BUNDLED.values()]
