"""Cluster box sizes into nine anchors with the 1 - IoU distance."""
import numpy as np

from cayolo.anchor_kmeans import assign_to_heads, avg_iou, format_anchors, kmeans_anchors
from cayolo.net_graph import DEFAULT_ANCHORS

rng = np.random.default_rng(7)

# a face-like corpus: mostly small, roughly square boxes with a long tail
side = rng.lognormal(mean=3.3, sigma=0.7, size=2000)
aspect = rng.normal(1.2, 0.15, size=2000).clip(0.6, 2.0)
boxes = np.stack([side, side * aspect], axis=1).clip(2, 416)

anchors, stats = kmeans_anchors(boxes, k=9, seed=42)
print("anchors:", format_anchors(np.round(anchors)))
print(f"mean IoU {stats.mean_iou:.4f} after {stats.iterations} iterations ({stats.stop_reason})")
print("members per anchor:", stats.counts)
print("cost history:", [round(c, 2) for c in stats.cost_history])

print(f"default COCO anchors on this corpus: mean IoU {avg_iou(boxes, DEFAULT_ANCHORS):.4f}")

for stride, triplet in zip((8, 16, 32), assign_to_heads(anchors)):
    print(f"stride {stride:>2}:", format_anchors(np.round(triplet)))
