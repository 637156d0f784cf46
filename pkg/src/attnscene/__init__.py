"""Multi-head attention pooling for acoustic scene classification, in numpy."""

from .config import RunConfig
from .features import FeatureConfig, log_mel
from .model import ModelConfig, SceneModel
from .synth import SynthConfig
from .training import TrainConfig, load_model, lr_at, train

__version__ = "0.1.0"

__all__ = ["FeatureConfig", "ModelConfig", "RunConfig", "SceneModel", "SynthConfig", "TrainConfig",
           "load_model", "log_mel", "lr_at", "train"]
