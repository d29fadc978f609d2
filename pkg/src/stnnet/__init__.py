"""Joint crowd density estimation, point localization and tracking."""

__version__ = "0.1.0"
