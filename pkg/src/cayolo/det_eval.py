"""Detection decoding, suppression, matching and AP / mAP evaluation.

Boxes are ``(x1, y1, x2, y2)`` pixel corners, 0-based half-open.  APs are
stored as fractions and rendered as percentages with two decimals.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, ParameterError, ShapeError
from .tensor_core import sigmoid

MATCH_IOU = 0.5
NMS_IOU = 0.45
EVAL_CONF = 0.05


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    score: float
    box: Tuple[float, float, float, float]

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise DomainError(f"degenerate detection box {self.box}")
        if not np.isfinite(self.score):
            raise DomainError(f"non-finite score {self.score}")


@dataclass(frozen=True)
class MatchCounts:
    tp: int
    fp: int
    fn: int


@dataclass
class ClassResult:
    ap: Optional[float]
    num_gt: int
    counts: MatchCounts
    recall: List[float] = field(default_factory=list)
    precision: List[float] = field(default_factory=list)


@dataclass
class EvalReport:
    classes: List[str]
    per_class: Dict[str, ClassResult]
    map: float
    iou_thresh: float = MATCH_IOU

    def to_dict(self) -> dict:
        out = {"iou_thresh": self.iou_thresh, "map": self.map,
               "map_percent": percent(self.map), "classes": {}}
        for name in self.classes:
            r = self.per_class[name]
            out["classes"][name] = {
                "ap": r.ap, "ap_percent": None if r.ap is None else percent(r.ap),
                "num_gt": r.num_gt, "tp": r.counts.tp, "fp": r.counts.fp, "fn": r.counts.fn,
                "recall": r.recall, "precision": r.precision,
            }
        return out

    def table(self) -> str:
        lines = [f"{'class':<16} {'AP(%)':>8} {'GT':>6} {'TP':>6} {'FP':>6}"]
        for name in self.classes:
            r = self.per_class[name]
            ap = "n/a" if r.ap is None else f"{percent(r.ap):.2f}"
            lines.append(f"{name:<16} {ap:>8} {r.num_gt:>6} {r.counts.tp:>6} {r.counts.fp:>6}")
        lines.append(f"{'mAP':<16} {percent(self.map):>8.2f}")
        return "\n".join(lines)


def percent(fraction: float) -> float:
    return round(100.0 * fraction, 2)


def _box_array(b) -> np.ndarray:
    arr = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if np.any(arr[:, 2] <= arr[:, 0]) or np.any(arr[:, 3] <= arr[:, 1]):
        raise DomainError(f"degenerate box in {arr.tolist()}")
    return arr


def iou_xyxy(a, b) -> float:
    """Intersection over union of two corner-form boxes."""
    return float(iou_matrix(a, b)[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    a, b = _box_array(a), _box_array(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(axis=2)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def decode_head(raw: np.ndarray, anchors, stride: int, conf_thresh: float = EVAL_CONF,
                image_ids: Optional[Sequence[str]] = None) -> List[Detection]:
    """Turn one head's raw logits into detections.

    Channels are anchor-major: anchor ``a`` owns channels
    ``a*(5+K) .. a*(5+K)+4+K`` holding tx, ty, tw, th, objectness, K class logits.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    na = len(anchors)
    n, ch, gh, gw = raw.shape
    if ch % na or ch // na < 6:
        raise ShapeError(f"{ch} head channels cannot hold {na} anchors x (5 + classes)")
    per = ch // na
    t = raw.reshape(n, na, per, gh, gw)
    jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
    cx = (jj + sigmoid(t[:, :, 0])) * stride
    cy = (ii + sigmoid(t[:, :, 1])) * stride
    bw = anchors[None, :, 0, None, None] * np.exp(t[:, :, 2])
    bh = anchors[None, :, 1, None, None] * np.exp(t[:, :, 3])
    obj = sigmoid(t[:, :, 4])
    cls_prob = sigmoid(t[:, :, 5:])
    cls_id = np.argmax(cls_prob, axis=2)
    score = obj * np.take_along_axis(cls_prob, cls_id[:, :, None], axis=2)[:, :, 0]

    dets = []
    for b, a, i, j in zip(*np.nonzero(score >= conf_thresh)):
        x, y, w, h = cx[b, a, i, j], cy[b, a, i, j], bw[b, a, i, j], bh[b, a, i, j]
        image_id = str(b) if image_ids is None else image_ids[b]
        dets.append(Detection(image_id, int(cls_id[b, a, i, j]), float(score[b, a, i, j]),
                              (float(x - w / 2), float(y - h / 2), float(x + w / 2), float(y + h / 2))))
    return dets


def nms(dets: Sequence[Detection], iou_thresh: float = NMS_IOU) -> List[Detection]:
    """Greedy per-class, per-image non-maximum suppression."""
    if not 0 < iou_thresh < 1:
        raise ParameterError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    groups = defaultdict(list)
    for d in dets:
        groups[(d.image_id, d.class_id)].append(d)
    kept = []
    for key in sorted(groups, key=lambda k: (str(k[0]), k[1])):
        group = sorted(groups[key], key=lambda d: (-d.score, d.box[0], d.box[1]))
        boxes = np.array([d.box for d in group])
        ious = iou_matrix(boxes, boxes)
        alive = np.ones(len(group), dtype=bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            kept.append(group[i])
            alive[i + 1:] &= ious[i, i + 1:] <= iou_thresh
    return kept


def rank_order(scores) -> np.ndarray:
    """Indices by descending score; ties keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_and_rank(dets: Sequence[Detection], gts: Dict[str, np.ndarray],
                   iou_thresh: float = MATCH_IOU):
    """Flag each detection TP or FP, highest score first.

    ``gts`` maps image id to an (m, 4) array of ground-truth boxes of the same
    class as ``dets``.  A detection claims the still-unmatched ground truth of
    its image with the highest IoU, if that IoU reaches ``iou_thresh``.
    Returns ``(flags, order, counts)`` where ``flags[k]`` is True when the
    k-th ranked detection (``dets[order[k]]``) is a true positive.
    """
    order = rank_order([d.score for d in dets])
    used = {img: np.zeros(len(b), dtype=bool) for img, b in gts.items()}
    flags = np.zeros(len(dets), dtype=bool)
    for rank, idx in enumerate(order):
        d = dets[idx]
        boxes = gts.get(d.image_id)
        if boxes is None or len(boxes) == 0:
            continue
        ious = iou_matrix(d.box, boxes)[0]
        ious[used[d.image_id]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            used[d.image_id][best] = True
            flags[rank] = True
    num_gt = sum(len(b) for b in gts.values())
    tp = int(flags.sum())
    return flags, order, MatchCounts(tp=tp, fp=len(dets) - tp, fn=num_gt - tp)


def precision_recall(tp: int, fp: int, fn: int) -> Tuple[float, Optional[float]]:
    """Precision and recall from counts.

    No predictions gives precision 1.  No ground truth gives recall None
    (undefined); such classes are left out of the mAP.
    """
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = None if tp + fn == 0 else tp / (tp + fn)
    return precision, recall


def pr_curve(flags, num_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each ranked detection."""
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt if num_gt else np.zeros(len(flags))
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def average_precision(recall, precision) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if recall.size == 0:
        return 0.0
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(aps: Iterable[float]) -> float:
    aps = [a for a in aps]
    if not aps:
        raise ParameterError("mean_ap needs at least one class AP")
    return float(np.mean(aps))


def evaluate(dets: Sequence[Detection], gts: Dict[str, Dict[int, np.ndarray]],
             classes: Sequence[str], iou_thresh: float = MATCH_IOU) -> EvalReport:
    """Per-class AP and mAP.

    ``gts[image_id][class_id]`` holds that image's ground-truth boxes.
    Classes without ground truth get AP None and are excluded from the mAP.
    """
    per_class = {}
    aps = []
    for cid, name in enumerate(classes):
        cls_dets = [d for d in dets if d.class_id == cid]
        cls_gts = {img: np.asarray(by_cls.get(cid, np.zeros((0, 4)))).reshape(-1, 4)
                   for img, by_cls in gts.items()}
        flags, _, counts = match_and_rank(cls_dets, cls_gts, iou_thresh)
        num_gt = counts.tp + counts.fn
        recall, precision = pr_curve(flags, num_gt)
        ap = average_precision(recall, precision) if num_gt else None
        if ap is not None:
            aps.append(ap)
        per_class[name] = ClassResult(ap, num_gt, counts, recall.tolist(), precision.tolist())
    return EvalReport(list(classes), per_class, mean_ap(aps), iou_thresh)


def read_detections_jsonl(path, classes: Sequence[str], require_score: bool = True) -> List[Detection]:
    """Read ``{image_id, class, score, box}`` records; ``class`` is a name or an index."""
    dets = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        cls = rec["class"]
        cid = classes.index(cls) if isinstance(cls, str) else int(cls)
        if not 0 <= cid < len(classes):
            raise ParameterError(f"{path}:{lineno}: class {cls!r} out of range")
        if require_score and "score" not in rec:
            raise ParameterError(f"{path}:{lineno}: detection has no score")
        dets.append(Detection(str(rec["image_id"]), cid, float(rec.get("score", 1.0)),
                              tuple(float(v) for v in rec["box"])))
    return dets


def write_detections_jsonl(path, dets: Sequence[Detection], classes: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps({"image_id": d.image_id, "class": classes[d.class_id],
                                 "score": d.score, "box": list(d.box)}) + "\n")


def group_ground_truth(records: Iterable[Detection]) -> Dict[str, Dict[int, np.ndarray]]:
    grouped: Dict[str, Dict[int, list]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        grouped[r.image_id][r.class_id].append(r.box)
    return {img: {c: np.array(b, dtype=np.float64) for c, b in by.items()}
            for img, by in grouped.items()}


def write_pr_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "rank", "recall", "precision"])
        for name in report.classes:
            r = report.per_class[name]
            for k, (rec, prec) in enumerate(zip(r.recall, r.precision), 1):
                writer.writerow([name, k, f"{rec:.17g}", f"{prec:.17g}"])
