"""torchbridge: serve PyTorch vision models over the regionprobe wire protocol."""

__version__ = "0.1.0"

from torchbridge.config import AdapterConfig
from torchbridge.models import WrappedModel, build_model

__all__ = ["AdapterConfig", "WrappedModel", "build_model", "__version__"]
