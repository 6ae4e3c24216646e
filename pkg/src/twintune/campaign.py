"""Config-driven tuning campaigns.

A campaign tunes the controller weights against a *target* plant using
randomized twins of a *nominal* plant, then validates the result on every
path of the library. The same driver runs the synthetic surfaces, which is
how the baseline comparisons are reproduced cheaply.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import N_THETA, OcpConfig
from .executor import RolloutJob, derive_seed, execute_batch
from .oracle import PerformanceRecord, RolloutConfig, write_trace
from .paths import BUNDLED, bundled_path
from .plant import DomainRandomizationSpec, PathGeometry, PlantParams, PlantState, load_path, sample_plant
from .synthetic import AffineProblem, BimodalProblem
from .tuner import ParameterBelief, TunerHyperparams, tune_iteration

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "CampaignConfig",
    "CampaignSummary",
    "load_config",
    "run_campaign",
    "validate_params",
    "run_baseline_suite",
    "VehicleProblem",
]


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------ config sections


@dataclass
class TunerSection:
    theta_min: list = field(default_factory=lambda: [0.05] * N_THETA)
    theta_max: list = field(default_factory=lambda: [50.0] * N_THETA)
    lambda_ut: float | None = None
    fusion_w: float = 0.5
    alpha: float = 0.95
    a0: float = 1.0
    safety_margin: float = 0.1
    mode: str = "auks"
    adapt_override: bool | None = None
    safety_check: bool = True
    cost_index: int = 2
    interior_margin: float = 0.0
    P0: float = 1.0
    C_dtheta0: float = 1.0
    C_v0: float = 1.0

    def hyperparams(self, mode: str | None = None) -> TunerHyperparams:
        return TunerHyperparams(
            theta_min=np.asarray(self.theta_min, dtype=float),
            theta_max=np.asarray(self.theta_max, dtype=float),
            lambda_ut=self.lambda_ut, fusion_w=self.fusion_w, alpha=self.alpha, a0=self.a0,
            safety_margin=self.safety_margin, mode=mode or self.mode, adapt_override=self.adapt_override,
            safety_check=self.safety_check, cost_index=self.cost_index,
            interior_margin=self.interior_margin,
        )


@dataclass
class PathSection:
    library: list = field(default_factory=lambda: [f"bundled:{name}" for name in BUNDLED])
    train_split: float = 0.8
    path_dr: bool = False


@dataclass
class NoiseSection:
    input_noise_std: list = field(default_factory=lambda: [0.01, 0.02])
    output_noise_std: list = field(default_factory=lambda: [0.01, 0.02, 0.01, 0.005, 0.002])
    initial_offset_std: list = field(default_factory=lambda: [0.02, 0.005])


@dataclass
class DRSection(NoiseSection):
    ranges: dict = field(default_factory=lambda: {"mass": 0.05, "yaw_inertia": 0.05, "Cf": 0.05, "Cr": 0.05,
                                                  "drive_gain": 0.05, "drag_coeff": 0.1})
    # one plant, start offset and noise stream for every twin of an iteration (common random numbers)
    shared_draws: bool = False


@dataclass
class RolloutSection:
    T: float = 85.0
    dt: float = 0.05
    # every episode starts at rest, displaced by this (w, theta_dev) from the lane centre
    initial_offset: list = field(default_factory=lambda: [1.0, 0.0])
    output_scale: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    controller: str = "nmpc"


@dataclass
class OcpSection:
    horizon: float = 3.0
    steps: int = 30
    state_lo: list = field(default_factory=lambda: [0.0, -3.0, -2.0, -1e6, -1e6, -1.2, -0.55, -1.0])
    state_hi: list = field(default_factory=lambda: [8.0, 3.0, 2.0, 1e6, 1e6, 1.2, 0.55, 1.0])
    input_lo: list = field(default_factory=lambda: [-0.6, -1.5])
    input_hi: list = field(default_factory=lambda: [0.6, 1.5])
    sqp_iters: int = 1
    warm_start: bool = True
    penalty: float = 1e3


def _nominal_plant_dict():
    return PlantParams().to_dict()


def _target_plant_dict():
    nom = PlantParams()
    return dataclasses.replace(
        nom, mass=nom.mass * 1.08, Cf=nom.Cf * 0.85, Cr=nom.Cr * 0.85, actuator_delay_steps=2,
        road_grade=0.04, drive_gain=nom.drive_gain * 0.9,
    ).to_dict()


@dataclass
class ProblemSection:
    kind: str = "vehicle"
    options: dict = field(default_factory=dict)


@dataclass
class CampaignConfig:
    campaign_seed: int = 0
    iterations: int = 6
    theta0: list = field(default_factory=lambda: [1.0] * N_THETA)
    tuner: TunerSection = field(default_factory=TunerSection)
    nominal_plant: dict = field(default_factory=_nominal_plant_dict)
    target_plant: dict = field(default_factory=_target_plant_dict)
    domain_randomization: DRSection = field(default_factory=DRSection)
    target_noise: NoiseSection = field(default_factory=NoiseSection)
    paths: PathSection = field(default_factory=PathSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    ocp: OcpSection = field(default_factory=OcpSection)
    problem: ProblemSection = field(default_factory=ProblemSection)
    output_dir: str | None = None
    workers: int | None = None
    write_traces: bool = False

    # ---- derived objects

    def plant(self, which: str) -> PlantParams:
        data = self.nominal_plant if which == "nominal" else self.target_plant
        return PlantParams(**data)

    def ocp_config(self) -> OcpConfig:
        o = self.ocp
        return OcpConfig(horizon=o.horizon, steps=o.steps, state_lo=tuple(o.state_lo), state_hi=tuple(o.state_hi),
                         input_lo=tuple(o.input_lo), input_hi=tuple(o.input_hi), sqp_iters=o.sqp_iters,
                         warm_start=o.warm_start, penalty=o.penalty, model=self.plant("nominal"))

    def dr_spec(self) -> DomainRandomizationSpec:
        d = self.domain_randomization
        return DomainRandomizationSpec(ranges=dict(d.ranges), input_noise_std=tuple(d.input_noise_std),
                                       output_noise_std=tuple(d.output_noise_std),
                                       path_pool=tuple(p.name for p in self.train_paths()),
                                       initial_offset_std=tuple(d.initial_offset_std))

    def load_paths(self) -> list[PathGeometry]:
        if not hasattr(self, "_paths_cache"):
            out = []
            for ref in self.paths.library:
                if ref.startswith("bundled:"):
                    out.append(bundled_path(ref.split(":", 1)[1]))
                else:
                    out.append(load_path(ref))
            object.__setattr__(self, "_paths_cache", out)
        return self._paths_cache

    def n_train(self) -> int:
        # rounding down keeps at least one more path held out for validation
        n = len(self.paths.library)
        return max(1, min(n, int(math.floor(self.paths.train_split * n + 1e-9))))

    def train_paths(self) -> list[PathGeometry]:
        return self.load_paths()[: self.n_train()]

    def validation_paths(self) -> list[PathGeometry]:
        paths = self.load_paths()
        held_out = paths[self.n_train():]
        return held_out if held_out else paths

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def validate(self):
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError("iterations: must be an integer >= 1")
        if not 0.0 < self.paths.train_split <= 1.0:
            raise ConfigError("paths.train_split: must lie in (0, 1]")
        if not self.paths.library:
            raise ConfigError("paths.library: needs at least one path")
        kind = self.problem.kind
        if kind not in PROBLEM_KINDS:
            raise ConfigError(f"problem.kind: unknown problem {kind!r}, choose from {PROBLEM_KINDS}")
        try:
            hp = self.tuner.hyperparams()
        except ValueError as exc:
            raise ConfigError(f"tuner: {exc}") from None
        theta0 = np.asarray(self.theta0, dtype=float)
        if theta0.size != hp.n_theta:
            raise ConfigError(f"theta0: has {theta0.size} entries but the bounds have {hp.n_theta}")
        if not hp.in_bounds(theta0):
            raise ConfigError("theta0: lies outside [theta_min, theta_max]")
        if kind == "vehicle":
            if hp.n_theta != N_THETA:
                raise ConfigError(f"tuner.theta_min: the vehicle controller has {N_THETA} weights")
            for name, fn in (("nominal_plant", lambda: self.plant("nominal")),
                             ("target_plant", lambda: self.plant("target")),
                             ("ocp", self.ocp_config), ("domain_randomization", self.dr_spec),
                             ("rollout", lambda: self.rollout_config(0, (0.0, 0.0), (0.0,) * 5, (0.0, 0.0))),
                             ("paths.library", self.load_paths)):
                try:
                    fn()
                except (ValueError, TypeError, OSError, KeyError) as exc:
                    raise ConfigError(f"{name}: {exc}") from None
            if self.rollout.controller != "nmpc":
                raise ConfigError("rollout.controller: tuning campaigns drive the NMPC weights")

    def rollout_config(self, seed, input_noise, output_noise, offset, keep_trace=False) -> RolloutConfig:
        r = self.rollout
        base = np.asarray(r.initial_offset, dtype=float)
        return RolloutConfig(
            T=r.T, dt=r.dt, seed=int(seed), input_noise_std=tuple(input_noise), output_noise_std=tuple(output_noise),
            initial_state=PlantState(), initial_offset=(float(base[0] + offset[0]), float(base[1] + offset[1])),
            controller=r.controller, ocp=self.ocp_config(), output_scale=tuple(r.output_scale), keep_trace=keep_trace,
        )


SECTION_TYPES = {
    "tuner": TunerSection,
    "domain_randomization": DRSection,
    "target_noise": NoiseSection,
    "paths": PathSection,
    "rollout": RolloutSection,
    "ocp": OcpSection,
    "problem": ProblemSection,
}
PLANT_KEYS = {f.name for f in dataclasses.fields(PlantParams)}
PROBLEM_KINDS = ("vehicle", "bimodal", "affine")


def _section(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{where}.{key}: unknown key")
    return cls(**data)


def config_from_dict(data: dict) -> CampaignConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    known = {f.name for f in dataclasses.fields(CampaignConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{key}: unknown key")
        if key in SECTION_TYPES:
            kwargs[key] = _section(SECTION_TYPES[key], value, key)
        elif key in ("nominal_plant", "target_plant"):
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            for sub in value:
                if sub not in PLANT_KEYS:
                    raise ConfigError(f"{key}.{sub}: unknown key")
            defaults = _nominal_plant_dict() if key == "nominal_plant" else _target_plant_dict()
            kwargs[key] = {**defaults, **value}
        else:
            kwargs[key] = value
    try:
        cfg = CampaignConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def load_config(path) -> CampaignConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    # relative path files resolve against the config location
    lib = data.get("paths", {}).get("library") if isinstance(data, dict) and isinstance(data.get("paths"), dict) else None
    if isinstance(lib, list):
        data["paths"]["library"] = [
            str((path.parent / ref).resolve())
            if isinstance(ref, str) and not ref.startswith("bundled:") and not Path(ref).is_absolute() else ref
            for ref in lib
        ]
    return config_from_dict(data)


# --------------------------------------------------------------- the problems


class VehicleProblem:
    """Maps tuner requests onto domain-randomized closed-loop rollouts."""

    def __init__(self, cfg: CampaignConfig, workers: int | None = None):
        self.cfg = cfg
        self.workers = workers
        self.seed = int(cfg.campaign_seed)
        self.nominal = cfg.plant("nominal")
        self.target = cfg.plant("target")
        self.dr = cfg.dr_spec()
        self.train = cfg.train_paths()
        self.traces: dict = {}

    def path_for(self, k: int) -> PathGeometry:
        if not self.cfg.paths.path_dr or len(self.train) == 1:
            return self.train[0]
        rng = np.random.default_rng(derive_seed(self.seed, k, 0, "path"))
        return self.train[int(rng.integers(len(self.train)))]

    def _offset(self, k, j, kind, std):
        std = np.asarray(std, dtype=float)
        if not np.any(std):
            return (0.0, 0.0)
        rng = np.random.default_rng(derive_seed(self.seed, k, j, kind + "/offset"))
        return tuple(float(v) for v in std * rng.standard_normal(2))

    def job(self, k: int, req) -> RolloutJob:
        cfg = self.cfg
        if req.kind == "target":
            noise = cfg.target_noise
            offset = self._offset(k, req.j, "target", noise.initial_offset_std)
            rc = cfg.rollout_config(derive_seed(self.seed, k, req.j, "target"), noise.input_noise_std,
                                    noise.output_noise_std, offset, keep_trace=cfg.write_traces)
            return RolloutJob(k, req.j, req.kind, req.theta, self.target, self.path_for(k), rc)
        if req.kind == "safety":
            # fixed seed and start: the verdict is a pure function of theta
            dr = cfg.domain_randomization
            rc = cfg.rollout_config(derive_seed(self.seed, 0, 0, "safety"), dr.input_noise_std,
                                    dr.output_noise_std, (0.0, 0.0))
            return RolloutJob(k, req.j, req.kind, req.theta, self.nominal, self.train[0], rc)
        # twins: the two SPSA probes share every random draw
        key = "spsa" if req.kind.startswith("spsa") else req.kind
        dr = cfg.domain_randomization
        j = req.j
        if dr.shared_draws:
            key, j = "twin", 0
        plant = sample_plant(self.dr, self.nominal, derive_seed(self.seed, k, j, key + "/plant"))
        offset = self._offset(k, j, key, dr.initial_offset_std)
        rc = cfg.rollout_config(derive_seed(self.seed, k, j, key), dr.input_noise_std, dr.output_noise_std, offset)
        return RolloutJob(k, req.j, req.kind, req.theta, plant, self.path_for(k), rc)

    def evaluate(self, k: int, requests) -> list:
        jobs = [self.job(k, r) for r in requests]
        results = execute_batch(jobs, self.workers)
        for job, rec in zip(jobs, results):
            if job.kind == "target" and job.config.keep_trace and not rec.failed:
                self.traces[k] = (write_trace(rec, job.config.dt), job.path.name)
        return results


def make_problem(cfg: CampaignConfig, workers=None):
    kind = cfg.problem.kind
    opts = dict(cfg.problem.options)
    if kind == "vehicle":
        return VehicleProblem(cfg, workers)
    if kind == "bimodal":
        return BimodalProblem(seed=cfg.campaign_seed, **opts)
    if kind == "affine":
        M = opts.pop("M")
        theta_star = opts.pop("theta_star")
        return AffineProblem.around(M, theta_star, seed=cfg.campaign_seed, **opts)
    raise ConfigError(f"problem.kind: unknown problem {kind!r}")


# -------------------------------------------------------------- the campaign


ITER_FIELDS = ["k", "theta", "kpi_target", "H_path", "H_velocity", "H_cost", "trace_P", "trace_Cdtheta",
               "trace_Cv", "c_k", "a_k", "accepted", "mode", "path"]


@dataclass
class CampaignSummary:
    iterations: list
    spread: list
    validation: list
    final_theta: np.ndarray
    beliefs: list
    reports: list
    mode: str

    @property
    def kpi(self) -> np.ndarray:
        return np.array([row["kpi_target"] for row in self.iterations])

    def trace_P(self) -> np.ndarray:
        return np.array([row["trace_P"] for row in self.iterations])

    def sigma_spread(self, metric: str = "H_path") -> np.ndarray:
        return np.array([row[f"{metric}_std"] for row in self.spread])

    def validation_metric(self, tuning: str, metric: str = "H_path", split: str = "validate") -> float:
        """Aggregate RMS of a metric over the paths of one split."""
        vals = [row[metric] for row in self.validation if row["tuning"] == tuning and row["split"] == split]
        return float(np.sqrt(np.mean(np.square(vals)))) if vals else float("nan")


def _iteration_row(i, theta, target_y, target_kpi, belief, report, mode, path_name):
    return {
        "k": i,
        "theta": np.asarray(theta, dtype=float).copy(),
        "kpi_target": float(target_kpi),
        "H_path": float(target_y[0]),
        "H_velocity": float(target_y[1]) if len(target_y) > 1 else float("nan"),
        "H_cost": float(target_y[2]) if len(target_y) > 2 else float("nan"),
        "trace_P": float(np.trace(belief.P)),
        "trace_Cdtheta": float(np.trace(belief.C_dtheta)),
        "trace_Cv": float(np.trace(belief.C_v)),
        "c_k": float(report.c_k) if report is not None else float("nan"),
        "a_k": float(report.a_k) if report is not None else float("nan"),
        "accepted": (int(report.accepted) if report is not None else ""),
        "mode": mode,
        "path": path_name,
    }


def _spread_row(i, Y):
    Y = np.asarray(Y, dtype=float)
    row = {"k": i, "n_sigma": int(Y.shape[0])}
    for col, name in enumerate(("H_path", "H_velocity", "H_cost")[: Y.shape[1]]):
        row[f"{name}_mean"] = float(np.mean(Y[:, col]))
        row[f"{name}_std"] = float(np.std(Y[:, col]))
    return row


def run_campaign(cfg: CampaignConfig, workers: int | None = None, mode: str | None = None,
                 output_dir=None, validate: bool = True) -> CampaignSummary:
    """Run ``cfg.iterations`` tuning iterations and evaluate the result.

    Row ``i`` of the iteration log describes the target-system rollout at the
    mean used by iteration ``i`` (row 0 is the initial weights); the last row
    is a closing evaluation of the final mean.
    """
    cfg.validate()
    hp = cfg.tuner.hyperparams(mode)
    workers = cfg.workers if workers is None else workers
    problem = make_problem(cfg, workers)
    n_out = getattr(problem, "n_out", 3)
    t = cfg.tuner
    belief = ParameterBelief.initial(cfg.theta0, hp, n_out=n_out, P0=t.P0, C_dtheta0=t.C_dtheta0, C_v0=t.C_v0)
    rows, spread, beliefs, reports = [], [], [belief], []
    path_name = (lambda k: problem.path_for(k).name) if isinstance(problem, VehicleProblem) else (lambda k: "")
    for i in range(cfg.iterations):
        new, rep = tune_iteration(belief, problem, hp, cfg.campaign_seed)
        rows.append(_iteration_row(i, belief.theta, rep.target_y, rep.target_kpi, belief, rep, hp.mode,
                                   path_name(belief.k)))
        spread.append(_spread_row(i, rep.sigma_y))
        log.info("iteration %d  kpi=%.5g  accepted=%s", i, rep.target_kpi, rep.accepted)
        reports.append(rep)
        beliefs.append(new)
        belief = new

    # closing evaluation of the final mean on the target system
    from .tuner import Request

    final_out = problem.evaluate(belief.k, [Request("target", 0, belief.theta.copy())])[0]
    if final_out.failed:
        raise RuntimeError(f"final target rollout failed: {final_out.error}")
    rows.append(_iteration_row(cfg.iterations, belief.theta, final_out.y, final_out.kpi, belief, None, hp.mode,
                               path_name(belief.k)))

    validation = []
    if validate and cfg.problem.kind == "vehicle":
        train_names = {p.name for p in cfg.train_paths()}
        for tuning, theta in (("initial", np.asarray(cfg.theta0, dtype=float)), ("final", belief.theta)):
            for row in validate_params(theta, cfg, cfg.load_paths(), workers):
                row["tuning"] = tuning
                row["split"] = "train" if row["path"] in train_names and cfg.paths.train_split < 1 else "validate"
                validation.append(row)

    summary = CampaignSummary(rows, spread, validation, belief.theta.copy(), beliefs, reports, hp.mode)
    out = output_dir if output_dir is not None else cfg.output_dir
    if out is not None:
        write_outputs(summary, cfg, out, problem)
    return summary


def validate_params(theta, cfg: CampaignConfig, path_set, workers=None) -> list[dict]:
    """Noise-free target-plant rollout of ``theta`` on every path."""
    theta = np.asarray(theta, dtype=float)
    target = cfg.plant("target")
    rc = cfg.rollout_config(0, (0.0, 0.0), (0.0,) * 5, (0.0, 0.0))
    jobs = [RolloutJob(0, j, "validate", theta, target, p, rc) for j, p in enumerate(path_set)]
    recs = execute_batch(jobs, workers)
    rows = []
    for p, rec in zip(path_set, recs):
        if rec.failed:
            raise RuntimeError(f"validation rollout on {p.name} failed: {rec.error}")
        h = rec.H
        rows.append({"path": p.name, "H_path": h[0], "H_velocity": h[1], "H_cost": h[2],
                     "kpi": rec.kpi, "completed": int(rec.completed)})
    return rows


def run_baseline_suite(cfg: CampaignConfig, seeds=5, modes=("auks", "const", "ukf"), workers=None,
                       output_dir=None) -> dict:
    """Run the same campaign in several modes over identical seeds.

    Returns ``{"rows": [...], "summary": {mode: {...}}}`` with one row per
    (mode, seed, iteration).
    """
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    rows = []
    finals: dict = {m: {"kpi": [], "trace_P": []} for m in modes}
    for mode in modes:
        for s in seeds:
            run_cfg = dataclasses.replace(cfg, campaign_seed=int(cfg.campaign_seed) + int(s), output_dir=None)
            summ = run_campaign(run_cfg, workers=workers, mode=mode, validate=False)
            for row in summ.iterations:
                rows.append({"mode": mode, "seed": int(s), "k": row["k"], "kpi": row["kpi_target"],
                             "trace_P": row["trace_P"]})
            finals[mode]["kpi"].append(summ.iterations[-1]["kpi_target"])
            finals[mode]["trace_P"].append(summ.iterations[-1]["trace_P"])
    summary = {m: {"median_final_kpi": float(np.median(v["kpi"])), "median_final_trace_P": float(np.median(v["trace_P"]))}
               for m, v in finals.items()}
    result = {"rows": rows, "summary": summary}
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "baseline.csv", ["mode", "seed", "k", "kpi", "trace_P"], rows)
        (out / "baseline_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


# ------------------------------------------------------------------- output


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row[h]) for h in header])
    path.write_text(buf.getvalue())


def write_outputs(summary: CampaignSummary, cfg: CampaignConfig, out_dir, problem=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(summary.final_theta)
    theta_cols = [f"theta_{i + 1}" for i in range(n)]
    iter_rows = []
    for row in summary.iterations:
        flat = {k: v for k, v in row.items() if k != "theta"}
        flat.update(dict(zip(theta_cols, row["theta"])))
        iter_rows.append(flat)
    header = ["k", *theta_cols, *[f for f in ITER_FIELDS if f not in ("k", "theta")]]
    _write_csv(out / "iterations.csv", header, iter_rows)
    if summary.spread:
        _write_csv(out / "spread.csv", list(summary.spread[0].keys()), summary.spread)
    if summary.validation:
        _write_csv(out / "validation.csv", ["tuning", "split", "path", "H_path", "H_velocity", "H_cost", "kpi",
                                            "completed"], summary.validation)
    doc = {
        "mode": summary.mode,
        "campaign_seed": cfg.campaign_seed,
        "iterations": cfg.iterations,
        "theta0": [float(v) for v in cfg.theta0],
        "final_theta": [float(v) for v in summary.final_theta],
        "kpi": [float(v) for v in summary.kpi],
        "accepted": [bool(r.accepted) for r in summary.reports],
    }
    if summary.validation:
        doc["validation_rms"] = {
            tuning: {m: summary.validation_metric(tuning, m) for m in ("H_path", "H_velocity", "H_cost")}
            for tuning in ("initial", "final")
        }
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(cfg.to_json())
    if isinstance(problem, VehicleProblem) and problem.traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for k, (text, _name) in sorted(problem.traces.items()):
            (tdir / f"target_k{k - 1}.csv").write_text(text)


def read_theta_csv(path) -> np.ndarray:
    """Parse a parameter vector from a CSV: one row of numbers, or the last row of an iteration log."""
    text = Path(path).read_text().strip().splitlines()
    rows = list(csv.reader(text))
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header = rows[0]
    if any(h.startswith("theta_") for h in header):
        cols = [i for i, h in enumerate(header) if h.startswith("theta_")]
        return np.array([float(rows[-1][i]) for i in cols])
    return np.array([float(v) for v in rows[-1]])
