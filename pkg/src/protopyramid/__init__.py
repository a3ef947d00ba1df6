"""Multi-scale prototype-based interpretable image classifier."""

from .backbone import BackboneConfig, FeaturePyramidNet
from .config import RunConfig
from .model import Model
from .prototypes import CLASS_NAMES, PrototypeConfig

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "CLASS_NAMES",
    "FeaturePyramidNet",
    "Model",
    "PrototypeConfig",
    "RunConfig",
    "__version__",
]
