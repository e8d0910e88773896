"""Prediction-driven KV-cache management for multi-agent LLM workflows.

A discrete-event simulator of a two-tier prefix cache serving many concurrent
agent workflows, with lifecycle-aware and lookahead-score eviction, prefetch
planning, and numerical checks of the score's error bounds.
"""

from ._validation import ValidationError
from .cache import RadixCache, Tier
from .callgraph import CallGraph, build_call_graph, load_call_graph, sample_workflow, true_kstep_marginals
from .forecast import Forecast
from .policies import Policy
from .predictor import MarkovPredictor, NoisyPredictor, OraclePredictor, make_predictor
from .scoring import ScoreParams, multi_step_score, single_step_value
from .simulator import CostModel, PromptModel, SimConfig, peak_working_set, run

__all__ = [
    "CallGraph",
    "CostModel",
    "Forecast",
    "MarkovPredictor",
    "NoisyPredictor",
    "OraclePredictor",
    "Policy",
    "PromptModel",
    "RadixCache",
    "ScoreParams",
    "SimConfig",
    "Tier",
    "ValidationError",
    "build_call_graph",
    "load_call_graph",
    "make_predictor",
    "multi_step_score",
    "peak_working_set",
    "run",
    "sample_workflow",
    "single_step_value",
    "true_kstep_marginals",
]

__version__ = "0.1.0"
