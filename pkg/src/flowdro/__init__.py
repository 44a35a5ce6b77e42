"""Least-favorable distributions in Wasserstein-2 balls via trained flow maps."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BracketError,
    ConfigError,
    ConvergenceError,
    DivergenceError,
    InfeasibleError,
    NonFiniteError,
    ShapeError,
    UnboundedError,
)
from .measures import DiagGaussian, EmpiricalMeasure, w2_assignment  # noqa: E402
from .flow import FlowBlock, FlowChain, make_block  # noqa: E402
from .train import LFDTrainConfig, MinMaxConfig, solve_minmax, train_lfd  # noqa: E402

__all__ = [
    "BracketError", "ConfigError", "ConvergenceError", "DivergenceError", "InfeasibleError", "NonFiniteError",
    "ShapeError", "UnboundedError", "DiagGaussian", "EmpiricalMeasure", "w2_assignment", "FlowBlock", "FlowChain",
    "make_block", "LFDTrainConfig", "MinMaxConfig", "solve_minmax", "train_lfd",
]
