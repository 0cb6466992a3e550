"""Referring image segmentation with frozen encoders, cost-volume adapters and
target-aware auxiliary losses, at desk scale."""

__version__ = "0.1.0"
