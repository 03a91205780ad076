"""Vehicle 3D boxes from 2D detections and LiDAR: frustum proposals, car-model fitting, CNN refinement."""
from .geometry import Box2, Box3, Calibration, Detection, PointCloud, iou_3d, iou_bev

__version__ = "0.1.0"

__all__ = ["Box2", "Box3", "Calibration", "Detection", "PointCloud", "iou_3d", "iou_bev", "__version__"]
