"""Active sequential hypothesis testing with switching costs."""

from importlib import metadata as _metadata

from .design import DesignSolution, brute_force_lambda, compute_beta, solve_design, solve_lambda, theoretical_bounds
from .engine import SwitchCostMatrix, TrialBatch, TrialRecord, run_trial, simulate
from .experiments import ExperimentConfig, run_batch, run_diagnostics, run_trials, tolerance_sweep
from .obs_models import Mixture, Model, kl_divergence, load_model, validate_model
from .policies import PolicyConfig, PolicyKind, PolicyState, next_composite_action
from .rng import TrialStream

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "DesignSolution",
    "ExperimentConfig",
    "Mixture",
    "Model",
    "PolicyConfig",
    "PolicyKind",
    "PolicyState",
    "SwitchCostMatrix",
    "TrialBatch",
    "TrialRecord",
    "TrialStream",
    "brute_force_lambda",
    "compute_beta",
    "kl_divergence",
    "load_model",
    "next_composite_action",
    "run_batch",
    "run_diagnostics",
    "run_trial",
    "run_trials",
    "simulate",
    "solve_design",
    "solve_lambda",
    "theoretical_bounds",
    "tolerance_sweep",
    "validate_model",
]
