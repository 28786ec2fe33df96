"""Conversion of predicted heatmaps into boxes, points and scored instances.

Head boxes come from Otsu-thresholding the head heatmap and taking the
bounding rectangle of the strongest connected component; gaze points are the
heatmap argmax. Each surviving proposal becomes an InstancePrediction scored
by the peak of its head map, the quantity ranked by the instance mAP metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .gtgen import Box, Point
from .model import ProposalSet

OTSU_BINS = 256
_CONNECT_8 = np.ones((3, 3), dtype=int)


class DegenerateMapError(ValueError):
    """Raised when a map is constant and no threshold separates two classes."""


@dataclass(frozen=True)
class InstancePrediction:
    """One decoded head-target instance ready for evaluation."""

    head_box: Box
    gaze_point: Point
    oof_prob: float
    confidence: float


def otsu_threshold(values: np.ndarray) -> float:
    """Threshold maximizing between-class variance over a 256-bin histogram.

    Bins span [min, max] of the map, which makes the threshold follow affine
    rescalings of the values up to bin width. Pixels strictly above the
    returned threshold form the foreground class.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(arr.min()), float(arr.max())
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("map contains non-finite values")
    if lo == hi:
        raise DegenerateMapError("constant map has no Otsu threshold")
    counts, edges = np.histogram(arr, bins=OTSU_BINS, range=(lo, hi))
    probs = counts.astype(np.float64) / arr.size
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(probs)
    w1 = 1.0 - w0
    mu0 = np.cumsum(probs * centers)
    mu_total = mu0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = np.where(
            (w0 > 0) & (w1 > 0), w0 * w1 * ((mu0 / w0 - (mu_total - mu0) / w1) ** 2), 0.0
        )
    k = int(np.argmax(between))  # first occurrence wins on ties
    return float(edges[k + 1])


def extract_head_box(head_map: np.ndarray) -> Box | None:
    """Bounding rectangle of the hottest connected component, or None.

    The map is binarized at its Otsu threshold; components use 8-connectivity
    and the one with the largest summed heat wins. The box is normalized to
    [0, 1]^2 using pixel edges. Constant maps yield None.
    """
    arr = np.asarray(head_map, dtype=np.float64)
    try:
        thresh = otsu_threshold(arr)
    except DegenerateMapError:
        return None
    mask = arr > thresh
    if not mask.any():
        return None
    labels, n_comp = ndimage.label(mask, structure=_CONNECT_8)
    if n_comp == 0:
        return None
    heat = ndimage.sum_labels(arr, labels, index=np.arange(1, n_comp + 1))
    best = int(np.argmax(heat)) + 1
    rows, cols = np.nonzero(labels == best)
    n, m = arr.shape
    return (
        float(cols.min() / m),
        float(rows.min() / n),
        float((cols.max() + 1) / m),
        float((rows.max() + 1) / n),
    )


def extract_gaze_point(gaze_map: np.ndarray) -> Point:
    """Pixel-center coordinates of the global argmax (row-major first on ties)."""
    arr = np.asarray(gaze_map)
    row, col = np.unravel_index(int(np.argmax(arr)), arr.shape)
    n, m = arr.shape
    return ((col + 0.5) / m, (row + 0.5) / n)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def to_instances(proposals: ProposalSet) -> list[InstancePrediction]:
    """Decode a scene's proposal set into ranked instance predictions.

    Proposals whose head map produces no box (all-zero or constant maps) are
    dropped. Confidence is the peak of the head map, which ranks instances
    for mAP whether or not their gaze target is in frame.
    """
    props = proposals.numpy()
    if props.head_maps.ndim != 3:
        raise ValueError("to_instances expects a per-scene ProposalSet; use .scene(b) first")
    oof_probs = _sigmoid(props.oof_logits)
    out: list[InstancePrediction] = []
    for k in range(props.head_maps.shape[0]):
        box = extract_head_box(props.head_maps[k])
        if box is None:
            continue
        out.append(
            InstancePrediction(
                head_box=box,
                gaze_point=extract_gaze_point(props.gaze_maps[k]),
                oof_prob=float(oof_probs[k]),
                confidence=float(props.head_maps[k].max()),
            )
        )
    return out
