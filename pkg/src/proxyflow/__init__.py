"""Frame-interpolation pretraining for optical flow estimation."""

__version__ = "0.1.0"
