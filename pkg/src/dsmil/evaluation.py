"""Detection metrics at the IoU > 0.5 operating point: per-class AP, mAP and CorLoc."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import iou_matrix

IOU_THRESHOLD = 0.5


class EvaluationError(ValueError):
    pass


@dataclass
class DetectionResult:
    image_id: str
    # class index -> [(box, score)], descending score
    detections: dict[int, list[tuple[tuple[float, float, float, float], float]]] = field(default_factory=dict)

    def top(self, cls: int):
        dets = self.detections.get(cls) or []
        if not dets:
            return None
        return max(dets, key=lambda d: d[1])


@dataclass
class PrCurve:
    precision: np.ndarray
    recall: np.ndarray
    ap: float | None  # None when the class has no ground truth


def _matches(dets: Sequence[tuple[str, Sequence[float], float]], gts: Mapping[str, np.ndarray]):
    """Greedy VOC matching by descending score. Returns the TP flags in sweep order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    claimed = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        image_id, box, _ = dets[i]
        g = gts.get(image_id)
        if g is None or len(g) == 0:
            continue
        ov = iou_matrix(np.asarray(box, dtype=np.float64), g)[0]
        j = int(np.argmax(ov))
        if ov[j] > IOU_THRESHOLD and not claimed[image_id][j]:
            claimed[image_id][j] = True
            tp[rank] = 1.0
    return tp


def all_point_ap(tp: np.ndarray, n_gt: int) -> PrCurve:
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return PrCurve(precision=precision, recall=recall, ap=ap)


def average_precision(dets, gts) -> PrCurve:
    """AP for one class.

    ``dets`` is a sequence of ``(image_id, box, score)``; ``gts`` maps
    image_id to an (m, 4) array of that class's boxes. A detection is a
    true positive when its best-overlapping ground truth has IoU > 0.5 and
    is still unclaimed.
    """
    gts = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in gts.items()}
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        # recall is undefined; the class is skipped by mean_ap
        return PrCurve(np.zeros(len(dets)), np.zeros(len(dets)), None)
    return all_point_ap(_matches(dets, gts), n_gt)


def mean_ap(per_class_ap: Mapping) -> float:
    vals = [v for v in per_class_ap.values() if v is not None]
    if not vals:
        raise EvaluationError("no evaluable class")
    return float(np.mean(vals))


def _class_gts(gt_boxes: Mapping[str, Sequence[tuple[int, Sequence[float]]]], cls: int) -> dict[str, np.ndarray]:
    return {
        img: np.array([b for c, b in items if c == cls], dtype=np.float64).reshape(-1, 4)
        for img, items in gt_boxes.items()
    }


def corloc(results: Sequence[DetectionResult], gt_boxes, positive: Mapping[str, Sequence[int]], num_classes: int):
    """Mean over classes of the fraction of positive images localized by their top detection.

    ``positive`` maps image_id to the classes present. Returns
    ``(mean, per_class)``; classes without positive images are left out.
    """
    by_id = {r.image_id: r for r in results}
    per_class = {}
    for cls in range(num_classes):
        imgs = sorted(img for img, labs in positive.items() if cls in labs)
        if not imgs:
            continue
        gts = _class_gts({i: gt_boxes.get(i, []) for i in imgs}, cls)
        hits = 0
        for img in imgs:
            res = by_id.get(img)
            best = res.top(cls) if res is not None else None
            if best is None or len(gts[img]) == 0:
                continue
            if iou_matrix(np.asarray(best[0]), gts[img]).max() > IOU_THRESHOLD:
                hits += 1
        per_class[cls] = hits / len(imgs)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return mean, per_class


def evaluate(results: Sequence[DetectionResult], gt_boxes, positive, num_classes: int) -> dict:
    """Metrics document with keys ``map``, ``per_class_ap``, ``corloc``, ``per_class_corloc``."""
    per_class_ap = {}
    for cls in range(num_classes):
        dets = [(r.image_id, box, score) for r in results for box, score in r.detections.get(cls, [])]
        per_class_ap[cls] = average_precision(dets, _class_gts(gt_boxes, cls)).ap
    cl, per_cl = corloc(results, gt_boxes, positive, num_classes)
    return {
        "map": mean_ap(per_class_ap),
        "per_class_ap": {str(k): v for k, v in per_class_ap.items()},
        "corloc": cl,
        "per_class_corloc": {str(k): v for k, v in per_cl.items()},
    }
