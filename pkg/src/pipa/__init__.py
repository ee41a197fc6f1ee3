"""Domain-adaptive segmentation with pixel, patch and temporal contrast, at desk scale."""

__version__ = "0.1.0"
