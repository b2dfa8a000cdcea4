"""Unsupervised anomaly segmentation by iterative spatial mask shrinking.

A reconstruction model trained on healthy slices fills spatially masked
regions, guided by the image's high-frequency content. At inference the
mask starts as the whole brain and is shrunk iteratively wherever the
reconstruction error says the tissue is confidently normal, until only
the anomaly remains masked.
"""

__version__ = "0.1.0"

from .errors import CheckpointError, ConfigError, ValidationError

__all__ = ["CheckpointError", "ConfigError", "ValidationError", "__version__"]
