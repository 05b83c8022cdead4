"""Fault-tolerant early-exit inference for int8 networks on approximate multipliers."""

from .approx_arith import MultiplierModel, make_exact, make_table, make_truncated, resolve_multiplier
from .epsilon import EpsilonConfig, epsilon_infer, evaluate_epsilon, sign_model
from .faults import FaultPlan, apply_plan, make_plan
from .model import ModelGraph, load_model, save_model

__all__ = [
    "EpsilonConfig",
    "FaultPlan",
    "ModelGraph",
    "MultiplierModel",
    "apply_plan",
    "epsilon_infer",
    "evaluate_epsilon",
    "load_model",
    "make_exact",
    "make_plan",
    "make_table",
    "make_truncated",
    "resolve_multiplier",
    "save_model",
    "sign_model",
]
__version__ = "0.1.0"
