"""Post-training quantization calibration and activation-outlier analysis."""

__version__ = "0.1.0"
