"""Anchor-box clustering with the 1 - IoU distance.

Boxes are (width, height) pairs compared as if they shared a top-left corner,
so only their extents matter.  Clustering is plain Lloyd iteration: assign each
box to the centre with the smallest 1 - IoU, then move each centre to the mean
(w, h) of its members.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DomainError, InsufficientDataError, ParameterError

NUM_ANCHORS = 9
HEAD_STRIDES = (8, 16, 32)


def _as_wh(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DomainError(f"expected (n, 2) width/height pairs, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError("box widths and heights must be positive and finite")
    return arr


def iou_wh(a, b) -> float:
    """IoU of two (w, h) boxes co-anchored at the origin."""
    (wa, ha), (wb, hb) = _as_wh(a)[0], _as_wh(b)[0]
    inter = min(wa, wb) * min(ha, hb)
    return float(inter / (wa * ha + wb * hb - inter))


def iou_wh_matrix(boxes, centers) -> np.ndarray:
    """Pairwise co-anchored IoU, shape (len(boxes), len(centers))."""
    b = _as_wh(boxes)[:, None, :]
    c = _as_wh(centers)[None, :, :]
    inter = np.minimum(b, c).prod(axis=2)
    return inter / (b.prod(axis=2) + c.prod(axis=2) - inter)


def sort_anchors(anchors) -> np.ndarray:
    """Sort ascending by area, ties broken by width."""
    a = _as_wh(anchors)
    order = np.lexsort((a[:, 0], a[:, 0] * a[:, 1]))
    return a[order]


@dataclass
class ClusterStats:
    iterations: int
    mean_iou: float
    counts: List[int]
    cost_history: List[float] = field(default_factory=list)
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "mean_iou": self.mean_iou,
                "counts": list(self.counts), "cost_history": list(self.cost_history),
                "stop_reason": self.stop_reason}


def _seed_centers(boxes: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # k-means++ with D = 1 - IoU, sampling proportional to D^2
    centers = [boxes[rng.integers(len(boxes))]]
    dist = 1.0 - iou_wh_matrix(boxes, np.array(centers))[:, 0]
    for _ in range(1, k):
        weights = dist ** 2
        total = weights.sum()
        if total <= 0:
            idx = int(rng.integers(len(boxes)))
        else:
            idx = int(rng.choice(len(boxes), p=weights / total))
        centers.append(boxes[idx])
        dist = np.minimum(dist, 1.0 - iou_wh_matrix(boxes, boxes[idx:idx + 1])[:, 0])
    return np.array(centers)


def _assign(boxes, centers):
    dist = 1.0 - iou_wh_matrix(boxes, centers)
    labels = np.argmin(dist, axis=1)   # first minimum = lowest cluster index
    cost = float(dist[np.arange(len(boxes)), labels].sum())
    return labels, dist, cost


def kmeans_anchors(boxes, k: int = NUM_ANCHORS, seed: int = 42, max_iter: int = 300,
                   tol: float = 1e-6, n_init: int = 5) -> Tuple[np.ndarray, ClusterStats]:
    """Cluster box sizes into ``k`` anchors.

    Returns the anchors as a (k, 2) array sorted by area, plus statistics.
    The loop stops when assignments stop changing, when no centre moves by
    more than ``tol`` (max absolute coordinate change), or at ``max_iter``.
    An empty cluster is re-seeded at the box farthest from its own centre.
    The mean is not the IoU-optimal centre, so a cluster whose mean would
    fit its members worse than the current centre keeps that centre.  With
    assignments fixed the cost splits over clusters, so no update step can
    raise it and ``cost_history`` never increases.  A final guard stops
    iteration (``cost_guard``) should rounding ever say otherwise.

    ``n_init`` independent seedings are run from one generator and the run
    with the lowest final cost is returned.
    """
    boxes = _as_wh(boxes)
    if k < 1 or n_init < 1:
        raise ParameterError(f"k and n_init must be positive, got k={k}, n_init={n_init}")
    if len(boxes) < k:
        raise InsufficientDataError(f"need at least {k} boxes to form {k} clusters, got {len(boxes)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        run = _lloyd(boxes, _seed_centers(boxes, k, rng), max_iter, tol)
        if best is None or run[3][-1] < best[3][-1]:
            best = run
    centers, labels, iterations, history, reason = best

    order = np.lexsort((centers[:, 0], centers[:, 0] * centers[:, 1]))
    anchors = centers[order]
    counts = np.bincount(labels, minlength=k)[order]
    stats = ClusterStats(iterations=iterations, mean_iou=avg_iou(boxes, anchors),
                         counts=[int(c) for c in counts], cost_history=history,
                         stop_reason=reason)
    return anchors, stats


def _lloyd(boxes, centers, max_iter, tol):
    k = len(centers)
    labels, dist, cost = _assign(boxes, centers)
    history = [cost]
    iterations = 0
    reason = "max_iter"
    while iterations < max_iter:
        iterations += 1
        new_centers = centers.copy()
        taken = set()
        for j in range(k):
            members = boxes[labels == j]
            if len(members):
                # the mean is not the IoU-optimal centre; keep the old one if it fits better
                mean = members.mean(axis=0, keepdims=True)
                before = np.sum(1.0 - iou_wh_matrix(members, centers[j:j + 1]))
                after = np.sum(1.0 - iou_wh_matrix(members, mean))
                if after <= before:
                    new_centers[j] = mean[0]
        for j in range(k):
            if not np.any(labels == j):
                own = dist[np.arange(len(boxes)), labels].copy()
                own[list(taken)] = -1.0
                far = int(np.argmax(own))
                taken.add(far)
                new_centers[j] = boxes[far]
        new_labels, new_dist, new_cost = _assign(boxes, new_centers)
        if new_cost > cost:
            reason = "cost_guard"
            break
        shift = float(np.max(np.abs(new_centers - centers)))
        changed = bool(np.any(new_labels != labels))
        centers, labels, dist, cost = new_centers, new_labels, new_dist, new_cost
        history.append(cost)
        if not changed:
            reason = "converged"
            break
        if shift < tol:
            reason = "tolerance"
            break
    return centers, labels, iterations, history, reason


def avg_iou(boxes, anchors) -> float:
    """Mean over boxes of the best co-anchored IoU against any anchor."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.size == 0:
        raise InsufficientDataError("avg_iou needs at least one box")
    return float(iou_wh_matrix(boxes, anchors).max(axis=1).mean())


def assign_to_heads(anchors) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split nine anchors into triplets for the stride 8, 16 and 32 heads."""
    a = _as_wh(anchors)
    if len(a) != NUM_ANCHORS:
        raise ParameterError(f"expected {NUM_ANCHORS} anchors, got {len(a)}")
    a = sort_anchors(a)
    return a[0:3], a[3:6], a[6:9]


def format_anchors(anchors) -> str:
    """Darknet-style single line: ``w1,h1, w2,h2, ...``."""
    return ", ".join(f"{w:g},{h:g}" for w, h in _as_wh(anchors))


def parse_anchors(text: str) -> np.ndarray:
    values = [float(v) for v in text.replace(",", " ").split()]
    if len(values) % 2:
        raise ParameterError(f"anchor list has an odd number of values: {text!r}")
    return _as_wh(np.array(values).reshape(-1, 2))


def read_boxes_file(path) -> np.ndarray:
    """Read one ``w,h`` pair per line; blank lines and ``#`` comments skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p for p in line.replace(",", " ").split() if p]
        if len(parts) != 2:
            raise DomainError(f"{path}:{lineno}: expected 'w,h', got {line!r}")
        rows.append((float(parts[0]), float(parts[1])))
    if not rows:
        return np.zeros((0, 2))
    return _as_wh(rows)


def write_boxes_file(path, boxes: Sequence) -> None:
    Path(path).write_text("".join(f"{w:.17g},{h:.17g}\n" for w, h in boxes))
