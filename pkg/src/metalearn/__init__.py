"""Meta-learning and stochastic bilevel optimization with reproducible benchmarks."""

__version__ = "0.1.0"

from .core import (ConvergenceError, NumericError, RngStream, TaskDataset, MetaBatch,
                   relative_error)
from .meta_algorithms import InnerConfig, OuterConfig, meta_train
from .bayes import BmamlConfig, bmaml_meta_train, svgd_step
from .bilevel import AlsetConfig, alset_solve
from .ridge_meta import ridge_inner_closed_form, ridge_meta_closed_form

__all__ = [
    "ConvergenceError", "NumericError", "RngStream", "TaskDataset", "MetaBatch",
    "relative_error", "InnerConfig", "OuterConfig", "meta_train", "BmamlConfig",
    "bmaml_meta_train", "svgd_step", "AlsetConfig", "alset_solve",
    "ridge_inner_closed_form", "ridge_meta_closed_form", "__version__",
]
