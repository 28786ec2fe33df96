"""Training objective over matched proposal/ground-truth pairs.

Five terms: MSE on head, gaze and connection heatmaps of the matched pairs,
MSE on the per-scene head detection map, and binary cross-entropy on the
out-of-frame flags. Flags are supervised for every proposal: matched ones
against their instance's label, unmatched ones against 1 (treated as looking
outside the frame, the no-object convention of set-prediction training).

All operations accept torch tensors or numpy arrays and preserve dtype, so
the same code path serves float32 training and float64 gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .gtgen import GroundTruthMaps
from .matching import Assignment

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_h: float = 1.0
    lambda_g: float = 2.5
    lambda_c: float = 1.0
    lambda_o: float = 1.0
    lambda_det: float = 1.0

    def __post_init__(self):
        vals = (self.lambda_h, self.lambda_g, self.lambda_c, self.lambda_o, self.lambda_det)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"loss weights must be finite and non-negative, got {vals}")


@dataclass
class LossBreakdown:
    """Per-term values plus their weighted total.

    Fields hold 0-dim torch tensors during training (so ``total`` can be
    backpropagated) and plain floats after ``detached()``.
    """

    l_h: torch.Tensor | float
    l_g: torch.Tensor | float
    l_c: torch.Tensor | float
    l_det: torch.Tensor | float
    l_o: torch.Tensor | float
    total: torch.Tensor | float

    def detached(self) -> "LossBreakdown":
        def to_float(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return LossBreakdown(*(to_float(getattr(self, f)) for f in self.field_order()))

    @staticmethod
    def field_order() -> tuple[str, ...]:
        # Also the column order of the training-log CSV.
        return ("l_h", "l_g", "l_c", "l_det", "l_o", "total")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def _stack(maps) -> torch.Tensor:
    if isinstance(maps, (list, tuple)):
        if len(maps) == 0:
            return torch.zeros((0, 1, 1))
        return torch.stack([_as_tensor(m) for m in maps])
    return _as_tensor(maps)


def heatmap_mse(preds, gts) -> torch.Tensor | float:
    """Mean squared error over M instance heatmaps: (1/M)(1/mn) sum of squares.

    Returns 0.0 for M = 0 (no in-frame instances supervise this term).
    """
    p = _stack(preds)
    g = _stack(gts)
    if p.shape[0] != g.shape[0]:
        raise ValueError(f"instance counts disagree: {p.shape[0]} vs {g.shape[0]}")
    if p.shape[0] == 0:
        return 0.0
    if p.shape != g.shape:
        raise ValueError(f"heatmap shapes disagree: {tuple(p.shape)} vs {tuple(g.shape)}")
    g = g.to(p.dtype)
    return ((g - p) ** 2).mean()


def detection_mse(pred, gt) -> torch.Tensor:
    """Pixelwise MSE between the predicted and target head detection maps."""
    p = _as_tensor(pred)
    g = _as_tensor(gt)
    if p.shape != g.shape:
        raise ValueError(f"detection map shapes disagree: {tuple(p.shape)} vs {tuple(g.shape)}")
    return ((g.to(p.dtype) - p) ** 2).mean()


def oof_bce(probs, labels) -> torch.Tensor:
    """Binary cross-entropy of out-of-frame probabilities against 0/1 labels.

    Probabilities are clamped to [eps, 1 - eps] for numerical stability.
    """
    p = _as_tensor(probs)
    y = _as_tensor(labels)
    if p.shape != y.shape:
        raise ValueError(f"lengths disagree: {tuple(p.shape)} vs {tuple(y.shape)}")
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def total_loss(
    proposals,
    det_map,
    gts: GroundTruthMaps,
    assignment: Assignment,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Compose the five-term objective for one scene.

    ``proposals`` is a per-scene ProposalSet (N head/gaze/connection maps plus
    N out-of-frame logits); ``det_map`` the scene's predicted detection map.
    Gaze and connection terms cover matched pairs only; out-of-frame instances
    still supervise their head map while their gaze and connection targets are
    zero maps. The head term covers every proposal, with unmatched slots
    supervised against zero maps: without that suppression the peak-of-head-map
    confidence used for instance ranking is meaningless on unmatched slots.
    Every unmatched proposal's flag is trained toward 1.
    """
    head = _as_tensor(proposals.head_maps)
    gaze = _as_tensor(proposals.gaze_maps)
    conn = _as_tensor(proposals.connection_maps)
    logits = _as_tensor(proposals.oof_logits)
    num_proposals = head.shape[0]
    zero = torch.zeros((), dtype=head.dtype)

    if assignment.pairs:
        head_targets = np.zeros(tuple(head.shape), dtype=np.float64)
        for i, j in assignment.pairs:
            head_targets[i] = gts.head_maps[j]
        l_h = heatmap_mse(head, head_targets)
        idx_p = [i for i, _ in assignment.pairs]
        idx_g = [j for _, j in assignment.pairs]
        l_g = heatmap_mse(gaze[idx_p], gts.gaze_maps[idx_g])
        l_c = heatmap_mse(conn[idx_p], gts.connection_maps[idx_g])
    else:
        l_h = l_g = l_c = zero

    l_det = detection_mse(det_map, gts.detection_map)

    labels = np.ones(num_proposals, dtype=np.float64)
    for i, j in assignment.pairs:
        labels[i] = float(gts.oof_labels[j])
    l_o = oof_bce(torch.sigmoid(logits), labels)

    w = weights
    total = w.lambda_h * l_h + w.lambda_g * l_g + w.lambda_c * l_c + w.lambda_o * l_o + w.lambda_det * l_det
    return LossBreakdown(l_h=l_h, l_g=l_g, l_c=l_c, l_det=l_det, l_o=l_o, total=total)
