"""Model-heterogeneous personalized federated learning by adaptive feature mixing.

A shared small extractor is aggregated across clients while every client keeps
its own (structurally different) model; per-client weight vectors blend the
two representations dimension by dimension before the local header.
"""

from .config import ExperimentConfig, parse_config
from .protocol import run_experiment

__all__ = ["ExperimentConfig", "parse_config", "run_experiment"]
__version__ = "0.1.0"
