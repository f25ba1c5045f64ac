"""Fine-grained image classification with per-block point selection and graph fusion.

Built on a small numpy reverse-mode autodiff engine (:mod:`finepim.tensor`).
"""

from .errors import ConfigError, DataError, FinePimError, NumericError
from .model import PimConfig, PimModel
from .optim import LionConfig, lion_step

__all__ = ["ConfigError", "DataError", "FinePimError", "NumericError", "PimConfig", "PimModel",
           "LionConfig", "lion_step"]
__version__ = "0.1.0"
