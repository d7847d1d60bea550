"""Detection evaluation: IoU matching, precision/recall, AP and mAP50.

Matching follows the usual single-assignment rule: detections are traversed
in descending confidence and each one claims the highest-IoU still-unmatched
ground truth (at or above the threshold). AP integrates the area under the
monotone precision envelope over every recall change point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Box = tuple[float, float, float, float]  # x1, y1, x2, y2


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map50: float
    counts: dict[int, ClassCounts]
    iou_threshold: float
    classes_without_gt: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(c): ap for c, ap in sorted(self.per_class_ap.items())},
            "mAP50": self.map50,
            "counts": {
                str(c): {"tp": n.tp, "fp": n.fp, "fn": n.fn}
                for c, n in sorted(self.counts.items())
            },
            "iou_threshold": self.iou_threshold,
            "classes_without_gt": self.classes_without_gt,
        }


def iou(box_a: Box, box_b: Box) -> float:
    """Intersection-over-union of two corner-format boxes."""
    for box in (box_a, box_b):
        x1, y1, x2, y2 = box
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"degenerate box {box}")
    ix1 = max(box_a[0], box_b[0])
    iy1 = max(box_a[1], box_b[1])
    ix2 = min(box_a[2], box_b[2])
    iy2 = min(box_a[3], box_b[3])
    iw = max(0.0, ix2 - ix1)
    ih = max(0.0, iy2 - iy1)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    return inter / (area_a + area_b - inter)


def match_detections(preds: list[tuple[float, Box]], gts: list[Box],
                     iou_threshold: float = 0.5
                     ) -> tuple[list[tuple[float, bool]], int]:
    """Classify one image's single-class detections as TP or FP.

    Detections are sorted by confidence descending and each may claim at most
    one ground truth (the highest-IoU unmatched one at IoU >= threshold).
    Returns (confidence, is_tp) pairs in traversal order plus the count of
    ground truths left unmatched (FN).
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][0], i))
    taken = [False] * len(gts)
    flags: list[tuple[float, bool]] = []
    for i in order:
        conf, box = preds[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou(box, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[best_j] = True
            flags.append((conf, True))
        else:
            flags.append((conf, False))
    return flags, taken.count(False)


def average_precision(flags: list[bool], n_gt: int) -> float:
    """Area under the monotone precision envelope of the PR curve.

    ``flags`` are TP indicators in descending-confidence order. All recall
    change points contribute (all-point interpolation). Zero ground truths
    define AP as 0.
    """
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    if n_gt == 0 or not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # Monotone envelope: precision at recall r is the best precision at any
    # recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def mean_ap(per_class_ap: dict[int, float]) -> float:
    """Unweighted mean AP over classes (callers pass only classes with GT)."""
    if not per_class_ap:
        raise ValueError("mean_ap needs at least one class with ground truth")
    return float(np.mean(list(per_class_ap.values())))


def evaluate_detections(image_preds: list[list[tuple[int, float, Box]]],
                        image_gts: list[list[tuple[int, Box]]],
                        num_classes: int,
                        iou_threshold: float = 0.5) -> EvalReport:
    """Aggregate per-image detections into per-class AP and mAP50.

    ``image_preds[i]`` holds (class_id, confidence, box) triples for image i;
    ``image_gts[i]`` holds (class_id, box) pairs. Matching runs per image and
    per class; AP is computed over the pooled detections of each class.
    """
    if len(image_preds) != len(image_gts):
        raise ValueError("prediction/ground-truth image counts differ")
    per_class_flags: dict[int, list[tuple[float, bool]]] = {c: [] for c in range(num_classes)}
    n_gt = {c: 0 for c in range(num_classes)}
    counts = {c: ClassCounts() for c in range(num_classes)}
    for preds, gts in zip(image_preds, image_gts):
        for c in range(num_classes):
            cls_preds = [(conf, box) for cls, conf, box in preds if cls == c]
            cls_gts = [box for cls, box in gts if cls == c]
            flags, fn = match_detections(cls_preds, cls_gts, iou_threshold)
            per_class_flags[c].extend(flags)
            n_gt[c] += len(cls_gts)
            counts[c].tp += sum(1 for _, tp in flags if tp)
            counts[c].fp += sum(1 for _, tp in flags if not tp)
            counts[c].fn += fn
    per_class_ap: dict[int, float] = {}
    no_gt: list[int] = []
    for c in range(num_classes):
        if n_gt[c] == 0:
            no_gt.append(c)
            continue
        pooled = sorted(per_class_flags[c], key=lambda ft: -ft[0])
        per_class_ap[c] = average_precision([tp for _, tp in pooled], n_gt[c])
    return EvalReport(per_class_ap=per_class_ap, map50=mean_ap(per_class_ap),
                      counts=counts, iou_threshold=iou_threshold,
                      classes_without_gt=no_gt)
