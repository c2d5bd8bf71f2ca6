"""Multi-channel temporal attention CNN for environmental sound classification."""

__version__ = "0.1.0"
