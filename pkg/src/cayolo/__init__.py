"""Coordinate-attention YOLOv4 toolkit on plain numpy."""

__version__ = "0.1.0"

from .anchor_kmeans import assign_to_heads, avg_iou, iou_wh, kmeans_anchors  # noqa: E402
from .coord_attention import (CAParams, ca_backward, ca_forward, ca_param_count,  # noqa: E402
                              directional_pool, init_ca_params)
from .det_eval import (Detection, average_precision, evaluate, iou_xyxy, mean_ap,  # noqa: E402
                       nms)
from .net_graph import NetConfig, build_model, describe, forward, param_count  # noqa: E402

__all__ = [
    "CAParams", "Detection", "NetConfig", "assign_to_heads", "average_precision", "avg_iou",
    "build_model", "ca_backward", "ca_forward", "ca_param_count", "describe", "directional_pool",
    "evaluate", "forward", "init_ca_params", "iou_wh", "iou_xyxy", "kmeans_anchors", "mean_ap",
    "nms", "param_count",
]
