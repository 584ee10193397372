"""Constrained policy optimization for stochastic control under
nonstationary uncertainty.

Subpackages: ``model`` (problem + scenarios), ``policy`` (tanh MLP),
``fwdiff`` (forward-mode derivatives), ``nlp`` (rollout NLP assembly),
``ipm`` (condensed-space interior-point solver), ``baselines`` (LQR,
MPC), ``evaluate`` (closed-loop harness), ``cli`` (command line).
"""

from .model import ControlProblem, MarkovEmbedding, ScenarioSet, benchmark_problem
from .policy import MlpPolicy, eval_policy, init_params
from .nlp import SampleNlp, RolloutBlockNlp
from .ipm import IpmOptions, ipm_solve

__all__ = [
    "ControlProblem",
    "MarkovEmbedding",
    "ScenarioSet",
    "benchmark_problem",
    "MlpPolicy",
    "eval_policy",
    "init_params",
    "SampleNlp",
    "RolloutBlockNlp",
    "IpmOptions",
    "ipm_solve",
]

__version__ = "0.1.0"
