"""LiDAR intensity calibration and reflectivity-based terrain segmentation."""

__version__ = "0.1.0"
