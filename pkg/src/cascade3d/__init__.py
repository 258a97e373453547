"""Cascaded 3D U-Nets for kidney and kidney-tumor segmentation."""

__version__ = "0.1.0"
