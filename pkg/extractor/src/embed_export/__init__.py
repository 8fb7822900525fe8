"""EfficientNet-B4 embedding exporter: walks an MVTec-style image folder and
writes per-level NPY activation tensors plus the JSON manifest consumed by
the detection library."""

from .config import ExtractorConfig
from .export import export_embeddings

__version__ = "0.1.0"

__all__ = ["ExtractorConfig", "export_embeddings"]
