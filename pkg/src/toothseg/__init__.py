"""Tooth segmentation on intraoral mesh scans: curvature features, an
attention point-cloud network with a curvature-guided loss, training,
full-resolution inference and metrics."""

__version__ = "0.1.0"
