"""Offline RL workflow lab: conservative actor-critics, exact tabular CQL and a
diagnosis advisor that reads only offline training metrics."""

from . import divergence
from .agents import BracConfig, CqlConfig, TrainingAborted, fit_behavior, train, train_brac, train_cql
from .envs import make_behavior, make_mdp
from .mdp_env import Dataset, TabularMDP, TabularPolicy, exact_policy_return, generate_dataset
from .rollout import BACKEND
from .runlog import CheckpointRef, RunLog
from .runstore import ExperimentRegistry, parse_config
from .workflow import (AlphaTrial, Diagnosis, Recommendation, advise_alpha, detect_overfitting,
                       detect_underfitting, diagnose_run, qvalue_error_bound, select_checkpoint)

__version__ = "0.1.0"
