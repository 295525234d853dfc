"""Global photo retouching with a modulated per-pixel network, on a numpy engine."""

__version__ = "0.1.0"
