"""rotdet: oriented object detection with a hybrid-anchor region proposal
network and orientation-aware convolution, implemented in pure numpy so the
full pipeline trains on a CPU at desk scale."""

from .geometry import (
    HorizontalBox,
    OrientedBox,
    Polygon4,
    canonicalize,
    min_area_rect,
    obb_to_polygon,
    polygon_to_obb,
    rotated_iou,
    rotated_nms,
)

__version__ = "0.1.0"

__all__ = [
    "HorizontalBox",
    "OrientedBox",
    "Polygon4",
    "canonicalize",
    "min_area_rect",
    "obb_to_polygon",
    "polygon_to_obb",
    "rotated_iou",
    "rotated_nms",
    "__version__",
]
