"""Coalition-guided federated learning for RIS cascaded-channel estimation."""

from .config import ExperimentConfig, load_config

__all__ = ["ExperimentConfig", "load_config"]
__version__ = "0.1.0"
