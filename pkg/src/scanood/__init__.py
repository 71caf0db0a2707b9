"""Scan-level out-of-distribution detection for 3D tumor segmentation pipelines."""

__version__ = "0.1.0"
