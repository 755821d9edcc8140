"""Semi-supervised sparse additive models with learned variable masks.

A bilevel procedure learns Bernoulli mask probabilities over input variables
with projected policy gradients, while an ADMM solver fits a
manifold-regularized additive kernel model for each sampled mask.
"""
from .dataset import (
    SemiDataset, SplitSpec, gen_additive_regression, gen_additive_synthetic, gen_moons,
    inject_corruption, load_csv, save_csv, split_labels,
)
from .errors import (
    DivergenceError, NumericalError, ParseError, S2MAMError, SingularSystemError, ValidationError,
)
from .experiment import ExperimentConfig, ResultTable, loocv_tune, mask_quality, run_experiment, score
from .lower_solver import AdmmSettings, LowerProblem, solve_lower
from .model import (
    FittedModel, decision_function, fit_basic, fit_s2mam, fit_supervised, load_model, predict,
    save_model, selected_variables,
)
from .params import HyperParams, RffSettings
from .upper_optimizer import project, run_bilevel

__version__ = "0.1.0"

__all__ = [
    "AdmmSettings", "DivergenceError", "ExperimentConfig", "FittedModel", "HyperParams",
    "LowerProblem", "NumericalError", "ParseError", "ResultTable", "RffSettings", "S2MAMError",
    "SemiDataset", "SingularSystemError", "SplitSpec", "ValidationError", "decision_function",
    "fit_basic", "fit_s2mam", "fit_supervised", "gen_additive_regression", "gen_additive_synthetic",
    "gen_moons", "inject_corruption", "load_csv", "load_model", "loocv_tune", "mask_quality",
    "predict", "project", "run_bilevel", "run_experiment", "save_csv", "save_model", "score",
    "selected_variables", "solve_lower", "split_labels",
]
