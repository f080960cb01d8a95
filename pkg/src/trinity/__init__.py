"""Joint class-specific / class-agnostic terrain segmentation at desk scale."""

__version__ = "0.1.0"
