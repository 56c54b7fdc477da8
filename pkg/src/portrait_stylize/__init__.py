"""Few-shot portrait stylization by domain calibration and texture translation."""

__version__ = "0.1.0"
