"""Visible-part depth ground truth and mesh-based densification for lidar objects."""

from .config import PipelineConfig
from .geometry import Box3D, CameraCalib, InstanceMask, PointCloud, TriangleMesh

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "Box3D", "CameraCalib", "InstanceMask", "PointCloud", "TriangleMesh"]
