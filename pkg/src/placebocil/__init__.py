"""Class-incremental learning that distills old-class knowledge through
placebo samples picked from a free unlabeled stream, with an Exp3 policy
choosing how placebos are scored each phase."""

from .config import ExperimentConfig, load_config
from .kernels import BACKEND
from .trainer import RunReport, run_experiment

__all__ = ["BACKEND", "ExperimentConfig", "RunReport", "load_config", "run_experiment"]
__version__ = "0.1.0"
