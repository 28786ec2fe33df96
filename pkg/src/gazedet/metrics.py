"""Evaluation metrics: gaze AUC, point distances, instance mAP, flag AP.

AUC ranks a predicted gaze heatmap against a binary grid with ones at the
quantized ground-truth points (Mann-Whitney with tie correction, so a constant
map scores exactly 0.5). Distances are Euclidean in normalized coordinates.
Instance mAP follows the detection convention: predictions ranked by
confidence, greedily matched within their scene, true positive iff head-box
IOU > 0.5 and, for in-frame targets, normalized gaze distance < 0.15; average
precision uses all-point interpolation. Out-of-frame flag AP ranks flag
probabilities the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .gtgen import Annotation, Box, Point
from .postprocess import InstancePrediction

IOU_THRESHOLD = 0.5
GAZE_DISTANCE_THRESHOLD = 0.15


@dataclass
class MetricReport:
    """Aggregate results of one evaluation run.

    ``oof_ap`` is None when the dataset has no out-of-frame instances (the
    metric is skipped, as for test sets with only in-frame targets).
    ``auc``, ``avg_dist`` and ``min_dist`` are means over evaluated in-frame
    instances.
    """

    auc: float
    avg_dist: float
    min_dist: float
    map_instance: float
    oof_ap: float | None
    counts: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "auc": self.auc,
            "avg_dist": self.avg_dist,
            "min_dist": self.min_dist,
            "map_instance": self.map_instance,
            "oof_ap": self.oof_ap,
            "counts": dict(self.counts),
        }


def auc_score(gaze_map: np.ndarray, gt_points: list[Point], gt_radius: int = 0) -> float:
    """Ranking AUC of heatmap values against binarized gaze locations.

    Ground truth is a grid at heatmap resolution with ones at each quantized
    point (dilated to a disk of ``gt_radius`` pixels when requested). Computed
    with the rank-sum formulation, which averages ranks across ties.
    """
    if not gt_points:
        raise ValueError("auc_score requires at least one in-frame gaze point")
    arr = np.asarray(gaze_map, dtype=np.float64)
    n, m = arr.shape
    positive = np.zeros((n, m), dtype=bool)
    for x, y in gt_points:
        col = int(np.clip(np.rint(x * m - 0.5), 0, m - 1))
        row = int(np.clip(np.rint(y * n - 0.5), 0, n - 1))
        if gt_radius <= 0:
            positive[row, col] = True
        else:
            rr, cc = np.ogrid[:n, :m]
            positive |= (rr - row) ** 2 + (cc - col) ** 2 <= gt_radius**2
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_neg == 0:
        raise ValueError("ground-truth grid covers every pixel; AUC undefined")
    ranks = rankdata(arr.ravel(), method="average")
    rank_sum = float(ranks[positive.ravel()].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def gaze_distances(pred_point: Point, gt_points: list[Point]) -> tuple[float, float]:
    """(average, minimum) Euclidean distance from prediction to ground truths.

    Distances are in normalized image coordinates; with a single annotation
    the two values coincide.
    """
    if not gt_points:
        raise ValueError("gaze_distances requires at least one ground-truth point")
    px, py = pred_point
    d = np.sqrt([(px - gx) ** 2 + (py - gy) ** 2 for gx, gy in gt_points])
    return float(d.mean()), float(d.min())


def box_iou(a: Box, b: Box) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _average_precision(tp_flags: np.ndarray, n_positive: int) -> float:
    """All-point interpolated AP given true-positive flags in rank order."""
    tp = np.cumsum(tp_flags.astype(np.float64))
    fp = np.cumsum((~tp_flags).astype(np.float64))
    recall = tp / n_positive
    precision = tp / (tp + fp)
    # precision envelope: best precision achievable at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def _gaze_hit(pred: InstancePrediction, ann: Annotation) -> bool:
    if ann.out_of_frame:
        return True  # only the head IOU gates out-of-frame instances
    dists = [
        np.hypot(pred.gaze_point[0] - gx, pred.gaze_point[1] - gy)
        for gx, gy in (ann.gaze_candidates or (ann.gaze_point,))
    ]
    return min(dists) < GAZE_DISTANCE_THRESHOLD


def instance_map(
    preds_by_scene: list[list[InstancePrediction]],
    gts_by_scene: list[list[Annotation]],
) -> float:
    """Dataset-level average precision over head-target instances.

    Predictions from all scenes are ranked together by descending confidence
    (stable, so equal confidences keep their original order) and greedily
    claim the unmatched same-scene ground truth with the highest qualifying
    IOU. Duplicates and near-misses count as false positives.
    """
    if len(preds_by_scene) != len(gts_by_scene):
        raise ValueError("prediction and ground-truth scene counts disagree")
    n_gt = sum(len(g) for g in gts_by_scene)
    if n_gt == 0:
        raise ValueError("instance mAP undefined without ground-truth instances")
    flat: list[tuple[float, int, InstancePrediction]] = []
    for s, preds in enumerate(preds_by_scene):
        flat.extend((p.confidence, s, p) for p in preds)
    if not flat:
        return 0.0
    order = sorted(range(len(flat)), key=lambda i: -flat[i][0])  # stable in rank order
    taken = [set() for _ in gts_by_scene]
    tp_flags = np.zeros(len(flat), dtype=bool)
    for rank, i in enumerate(order):
        _, s, pred = flat[i]
        best_iou, best_j = 0.0, -1
        for j, ann in enumerate(gts_by_scene[s]):
            if j in taken[s]:
                continue
            iou = box_iou(pred.head_box, ann.head_box)
            if iou > IOU_THRESHOLD and iou > best_iou and _gaze_hit(pred, ann):
                best_iou, best_j = iou, j
        if best_j >= 0:
            taken[s].add(best_j)
            tp_flags[rank] = True
    return _average_precision(tp_flags, n_gt)


def oof_ap(probs: list[float], labels: list[bool]) -> float | None:
    """Average precision of the out-of-frame flags, or None without positives.

    Returns None when no instance is labeled out-of-frame (the metric is
    skipped for in-frame-only test sets).
    """
    if len(probs) != len(labels):
        raise ValueError("probs and labels lengths disagree")
    if not probs:
        raise ValueError("oof_ap requires at least one scored instance")
    y = np.asarray(labels, dtype=bool)
    if not y.any():
        return None
    order = sorted(range(len(probs)), key=lambda i: -float(probs[i]))
    return _average_precision(y[order], int(y.sum()))
