"""Stack-based volumetric CT segmentation toolkit."""

__version__ = "0.1.0"
