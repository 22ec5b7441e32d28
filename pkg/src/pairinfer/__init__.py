"""Low-rank multi-category Bradley-Terry models with efficient one-step inference."""

from .arena import ArenaData, PersistedModel, fit_model, ingest, leaderboard, run_inference
from .fitting import FitConfig, FitReport, altmin_fit, fit_lowrank, naive_per_task_btl, refine_entrywise
from .geometry import TangentFrame, center_columns, pairwise_constant, tangent_project, truncate_rank
from .inference import (
    EstimateReport,
    FunctionalSpec,
    crossfit,
    efficient_nonuniform_one_step,
    efficient_one_step,
    estimate_all,
    ipw_one_step,
    naive_estimate,
    oracle_se,
    parse_target,
    whitened_one_step,
)
from .model import Battles, SamplingModel, sample_battles
from .simlab import SimConfig, mc_summary, run_study

__all__ = [
    "ArenaData",
    "Battles",
    "EstimateReport",
    "FitConfig",
    "FitReport",
    "FunctionalSpec",
    "PersistedModel",
    "SamplingModel",
    "SimConfig",
    "TangentFrame",
    "altmin_fit",
    "center_columns",
    "crossfit",
    "efficient_nonuniform_one_step",
    "efficient_one_step",
    "estimate_all",
    "fit_lowrank",
    "fit_model",
    "ingest",
    "ipw_one_step",
    "leaderboard",
    "mc_summary",
    "naive_estimate",
    "naive_per_task_btl",
    "oracle_se",
    "pairwise_constant",
    "parse_target",
    "refine_entrywise",
    "run_inference",
    "run_study",
    "sample_battles",
    "tangent_project",
    "truncate_rank",
    "whitened_one_step",
]

__version__ = "0.1.0"
