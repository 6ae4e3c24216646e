"""Auto-tuning of NMPC path-tracking weights with randomized digital twins."""

from .campaign import CampaignConfig, load_config, run_baseline_suite, run_campaign, validate_params
from .controller import ControllerParams, OcpConfig, solve_ocp
from .executor import RolloutJob, derive_seed, execute_batch
from .oracle import PerformanceRecord, RolloutConfig, run_oracle
from .plant import DomainRandomizationSpec, PathGeometry, PlantParams, PlantState, sample_plant
from .tuner import ParameterBelief, TunerHyperparams, tune_iteration

__version__ = "0.1.0"

__all__ = [
    "CampaignConfig", "load_config", "run_campaign", "run_baseline_suite", "validate_params",
    "ControllerParams", "OcpConfig", "solve_ocp",
    "RolloutJob", "derive_seed", "execute_batch",
    "PerformanceRecord", "RolloutConfig", "run_oracle",
    "DomainRandomizationSpec", "PathGeometry", "PlantParams", "PlantState", "sample_plant",
    "ParameterBelief", "TunerHyperparams", "tune_iteration",
]
