"""pointfuse: desk-scale multi-modal 3D detection.

Image features are lifted into pseudo points through a depth-binned
frustum, fused with raw LiDAR points by a two-stream attention network,
and decoded into oriented boxes; everything runs on a minimal float64
autodiff core so every gradient is checkable against finite differences.
"""

__version__ = "0.1.0"

from . import boxes, config, frustum, fusion, geometry, kitti, losses, nn, pipeline, tensor

__all__ = ["boxes", "config", "frustum", "fusion", "geometry", "kitti", "losses",
           "nn", "pipeline", "tensor", "__version__"]
