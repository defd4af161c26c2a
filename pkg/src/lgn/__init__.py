"""Language guided temporal moment retrieval at desk scale."""

from .grad import BACKEND
from .model import LGNModel, ModelConfig

__version__ = "0.1.0"

__all__ = ["BACKEND", "LGNModel", "ModelConfig", "__version__"]
