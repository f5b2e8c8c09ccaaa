"""Adaptive pre-specification with TMLE for covariate adjustment in randomized trials."""
__version__ = "0.1.0"

from .adaptive_prespec import Selection, make_folds, precision_gain, run_adaptive_prespec
from .config import ConfigError, CvScheme, SapConfig, load_config, parse_config
from .data_model import CsvSchema, DataError, TrialDataset, load_csv, scale_outcome
from .glm_core import fit_logistic
from .learners import LearnerSpec, parse_learner
from .tmle_engine import TargetedEstimate, run_tmle

__all__ = [
    "__version__",
    "ConfigError",
    "CsvSchema",
    "CvScheme",
    "DataError",
    "LearnerSpec",
    "SapConfig",
    "Selection",
    "TargetedEstimate",
    "TrialDataset",
    "fit_logistic",
    "load_config",
    "load_csv",
    "make_folds",
    "parse_config",
    "parse_learner",
    "precision_gain",
    "run_adaptive_prespec",
    "run_tmle",
    "scale_outcome",
]
