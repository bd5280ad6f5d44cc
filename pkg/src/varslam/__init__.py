"""Adaptive robust-kernel optimization core for dynamic-scene visual SLAM."""

__version__ = "0.1.0"
