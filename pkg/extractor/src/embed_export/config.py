"""Exporter configuration."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_IMAGE_SIZE = 380
DEFAULT_LEVELS = (4, 6, 7)


@dataclass
class ExtractorConfig:
    """Where to read images, where to write tensors, and how to embed.

    weights: "imagenet" for the published pretrained weights (downloaded or
    cached by torchvision), a filesystem path to a state-dict checkpoint, or
    "random:<seed>" for a deterministic random initialization (hermetic runs
    without network access; recorded in provenance).
    """

    input_dir: Path
    output_dir: Path
    image_size: int = DEFAULT_IMAGE_SIZE
    levels: tuple[int, ...] = field(default_factory=lambda: DEFAULT_LEVELS)
    batch_size: int = 8
    weights: str = "imagenet"
    deterministic: bool = True

    def __post_init__(self):
        self.input_dir = Path(self.input_dir)
        self.output_dir = Path(self.output_dir)
        self.levels = tuple(int(l) for l in self.levels)
        if not self.levels:
            raise ValueError("need at least one feature level")
        if not all(1 <= l <= 7 for l in self.levels):
            raise ValueError(f"levels must be block indices in 1..7, got {self.levels}")
        if self.image_size < 32:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
