"""Image feature extraction into the NICF binary format."""

__version__ = "0.1.0"
