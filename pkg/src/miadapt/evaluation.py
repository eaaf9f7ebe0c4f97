"""Detection evaluation: per-class AP at a fixed IoU threshold and mAP.

Uses all-point interpolation (area under the precision envelope) and
greedy confidence-ordered matching with one-to-one detection/GT pairing.
Classes without ground truth in the split are excluded from the mAP
mean. Seed aggregation reports mean and population standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Annotation, Dataset, Detection, iou
from .detector import ModelParams, RefDetector, detect


@dataclass(frozen=True)
class EvalReport:
    per_class_ap: dict[int, float]  # only classes with ground truth
    map50: float
    n_images: int
    n_gt: dict[int, int]            # all classes

    def __post_init__(self):
        if self.per_class_ap:
            mean = float(np.mean(list(self.per_class_ap.values())))
            if abs(mean - self.map50) > 1e-9:
                raise ValueError("map50 must equal the mean per-class AP")


@dataclass(frozen=True)
class SeedAggregate:
    mean: float
    std: float  # population standard deviation
    runs: tuple[float, ...]


def match_detections(
    dets: list[Detection], gts: list[Annotation], iou_thresh: float = 0.5
) -> list[bool]:
    """TP/FP flags for one image and one class, in descending-confidence
    order (ties by larger best-IoU, then input order). Each ground-truth
    box matches at most one detection."""
    ranked = sorted(
        range(len(dets)),
        key=lambda i: (
            -dets[i].confidence,
            -max((iou(dets[i].box, g.box) for g in gts), default=0.0),
            i,
        ),
    )
    taken = [False] * len(gts)
    flags: list[bool] = []
    for i in ranked:
        best_iou, best = 0.0, -1
        for gi, g in enumerate(gts):
            if taken[gi]:
                continue
            v = iou(dets[i].box, g.box)
            if v > best_iou:  # strict: equal IoUs keep the lowest gt index
                best_iou, best = v, gi
        if best >= 0 and best_iou >= iou_thresh:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: list[bool], n_gt: int) -> float:
    """All-point interpolated AP from confidence-ordered TP/FP flags."""
    if n_gt <= 0 or not flags:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def evaluate_detections(
    per_image: list[tuple[list[Detection], list[Annotation]]],
    classes: list[int],
    iou_thresh: float = 0.5,
) -> EvalReport:
    """AP per class from already-computed detections (one entry per image)."""
    n_gt = {c: 0 for c in classes}
    for _, gts in per_image:
        for g in gts:
            n_gt[g.class_id] += 1

    per_class_ap: dict[int, float] = {}
    for c in classes:
        if n_gt[c] == 0:
            continue
        scored: list[tuple[float, int, bool]] = []  # (confidence, image idx, flag)
        for img_idx, (dets, gts) in enumerate(per_image):
            dets_c = [d for d in dets if d.class_id == c]
            gts_c = [g for g in gts if g.class_id == c]
            flags = match_detections(dets_c, gts_c, iou_thresh)
            confs = sorted((d.confidence for d in dets_c), reverse=True)
            scored.extend((cf, img_idx, fl) for cf, fl in zip(confs, flags))
        scored.sort(key=lambda t: (-t[0], t[1]))
        per_class_ap[c] = average_precision([fl for _, _, fl in scored], n_gt[c])

    map50 = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return EvalReport(per_class_ap, map50, len(per_image), n_gt)


def evaluate(
    params: ModelParams | RefDetector,
    d: Dataset,
    score_thresh: float = 0.05,
    iou_thresh: float = 0.5,
    nms_thresh: float = 0.5,
) -> EvalReport:
    """Run the detector on every image and score mAP@iou_thresh."""
    if len(d) == 0:
        raise ValueError("empty evaluation dataset")
    model = params if isinstance(params, RefDetector) else RefDetector.from_params(params)
    per_image = [
        (detect(model, s.image, score_thresh, nms_thresh), list(s.annotations)) for s in d
    ]
    return evaluate_detections(per_image, list(range(1, d.num_classes + 1)), iou_thresh)


def aggregate_seeds(reports: list[EvalReport | float]) -> SeedAggregate:
    """Mean and population std of map50 over repeated runs."""
    if not reports:
        raise ValueError("need at least one report")
    runs = tuple(float(r.map50 if isinstance(r, EvalReport) else r) for r in reports)
    return SeedAggregate(float(np.mean(runs)), float(np.std(runs)), runs)
