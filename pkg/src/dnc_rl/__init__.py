"""Divide-and-conquer policy optimization.

Partition a task's initial-state distribution into contexts with
k-means, train one trust-region policy per context under pairwise
KL-divergence penalties, and periodically distill the ensemble into a
single global policy.  Ships three desk-scale continuous-control
environments plus the standard comparison variants behind one trainer
interface and a benchmark CLI.
"""

from .dnc import DnCConfig, EnsembleState, PenaltyReport, run_dnc
from .envs import ENVS, make_env
from .harness import ExperimentConfig, load_config, run_experiment, summarize
from .partition import Partition, kmeans
from .policy import GaussianPolicy, load_policy, make_policy, save_policy
from .rng import Rng
from .trpo import TrpoConfig, trpo_step

__all__ = [
    "DnCConfig",
    "ENVS",
    "EnsembleState",
    "ExperimentConfig",
    "GaussianPolicy",
    "Partition",
    "PenaltyReport",
    "Rng",
    "TrpoConfig",
    "kmeans",
    "load_config",
    "load_policy",
    "make_env",
    "make_policy",
    "run_dnc",
    "run_experiment",
    "save_policy",
    "summarize",
    "trpo_step",
]

__version__ = "0.1.0"
