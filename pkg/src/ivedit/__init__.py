"""Flow-guided, reference-image-driven video editing on synthetic sprite
videos, with a self-contained evaluation benchmark."""

__version__ = "0.1.0"
