"""Maximum-entropy regularized segmentation with uncertainty and calibration tooling."""

__version__ = "0.1.0"
