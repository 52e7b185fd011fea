"""Multi-camera trajectory forecasting with trajectory tensors."""

__version__ = "0.1.0"
