"""Bidirectional long-range parser: segment-recurrent attention with latent summaries."""
__version__ = "0.1.0"

from .model import BLRPModel, ModelConfig, param_count, preset  # noqa: E402
from .latent import Direction, InitVariant, ProjectionSharing  # noqa: E402

__all__ = ["BLRPModel", "ModelConfig", "param_count", "preset", "Direction", "InitVariant",
           "ProjectionSharing", "__version__"]
