"""Zero-shot anomaly detection with prompt learning over frozen VLM backbones."""

__version__ = "0.1.0"

from .config import PipelineConfig, config_keys, load_config
from .estimator import ZeroShotAnomalyDetector
from .pipeline import Pipeline

__all__ = [
    "Pipeline",
    "PipelineConfig",
    "ZeroShotAnomalyDetector",
    "config_keys",
    "load_config",
    "__version__",
]
