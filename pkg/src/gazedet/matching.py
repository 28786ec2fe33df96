"""One-to-one assignment of predicted proposals to ground-truth instances.

Each training scene has N predicted head-target proposals and M ground-truth
instances (M <= N). Before any loss is computed, proposals are matched to
instances by minimizing a weighted cost built from the gaze heatmaps, head
heatmaps and out-of-frame probabilities. Proposals left unmatched are later
supervised only through the out-of-frame objective with target 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .gtgen import GroundTruthMaps


class CapacityExceededError(ValueError):
    """Raised when a scene holds more instances than the model has proposals."""


@dataclass(frozen=True)
class MatchWeights:
    w_gaze: float = 1.0
    w_head: float = 2.5
    w_oof: float = 1.0

    def __post_init__(self):
        if min(self.w_gaze, self.w_head, self.w_oof) < 0:
            raise ValueError("matching weights must be non-negative")


@dataclass(frozen=True)
class Assignment:
    """Matched (proposal_index, gt_index) pairs and their summed cost."""

    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    def proposal_to_gt(self) -> dict[int, int]:
        return dict(self.pairs)


def _rms(diff: np.ndarray) -> float:
    # Euclidean norm of the flattened difference, scaled by sqrt(#pixels) so
    # the term is resolution independent and commensurate with the flag term.
    return float(np.linalg.norm(diff.ravel()) / np.sqrt(diff.size))


def matching_cost(
    pred_head: np.ndarray,
    pred_gaze: np.ndarray,
    pred_oof_prob: float,
    gt_head: np.ndarray,
    gt_gaze: np.ndarray,
    gt_oof: bool,
    weights: MatchWeights = MatchWeights(),
) -> float:
    """Pairing cost between one proposal and one ground-truth instance.

    cost = w_gaze * RMS(G_pred - G_gt) + w_head * RMS(H_pred - H_gt)
         + w_oof * |p_oof - o_gt|
    """
    if pred_head.shape != gt_head.shape or pred_gaze.shape != gt_gaze.shape:
        raise ValueError(
            f"heatmap shapes disagree: pred {pred_head.shape}/{pred_gaze.shape} "
            f"vs gt {gt_head.shape}/{gt_gaze.shape}"
        )
    cost = weights.w_gaze * _rms(np.asarray(pred_gaze, dtype=np.float64) - gt_gaze)
    cost += weights.w_head * _rms(np.asarray(pred_head, dtype=np.float64) - gt_head)
    cost += weights.w_oof * abs(float(pred_oof_prob) - float(gt_oof))
    return cost


def build_cost_matrix(
    head_maps: np.ndarray,
    gaze_maps: np.ndarray,
    oof_probs: np.ndarray,
    gts: GroundTruthMaps,
    weights: MatchWeights = MatchWeights(),
) -> np.ndarray:
    """Vectorized N x M cost matrix; entry [i, j] equals matching_cost(i, j)."""
    n = head_maps.shape[0]
    m = gts.num_instances
    heads = np.asarray(head_maps, dtype=np.float64).reshape(n, 1, -1)
    gazes = np.asarray(gaze_maps, dtype=np.float64).reshape(n, 1, -1)
    gt_heads = np.asarray(gts.head_maps, dtype=np.float64).reshape(1, m, -1)
    gt_gazes = np.asarray(gts.gaze_maps, dtype=np.float64).reshape(1, m, -1)
    npix = np.sqrt(heads.shape[-1])
    cost = weights.w_gaze * np.linalg.norm(gazes - gt_gazes, axis=-1) / npix
    cost += weights.w_head * np.linalg.norm(heads - gt_heads, axis=-1) / npix
    probs = np.asarray(oof_probs, dtype=np.float64).reshape(n, 1)
    cost += weights.w_oof * np.abs(probs - gts.oof_labels.astype(np.float64)[None, :])
    return cost


def hungarian(cost_matrix: np.ndarray) -> Assignment:
    """Minimum-cost one-to-one assignment of size min(N, M).

    Ties between equal-cost optima are broken deterministically in favor of
    lower proposal indices: among optimal assignments, lower-indexed proposals
    are matched first and receive the lexicographically smallest gt indices.
    """
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if 0 in cost.shape:
        return Assignment(pairs=(), total_cost=0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = _canonical_ties(cost, dict(zip(rows.tolist(), cols.tolist())))
    total = float(sum(cost[i, j] for i, j in pairs))
    return Assignment(pairs=tuple(pairs), total_cost=total)


def _canonical_ties(cost: np.ndarray, assigned: dict[int, int]) -> list[tuple[int, int]]:
    # Cost-neutral local moves until no move favors a lower proposal index:
    # (a) shift a match from proposal i to an unmatched i' < i of equal cost,
    # (b) swap the gt indices of two matched proposals when doing so gives the
    #     lower-indexed proposal the smaller gt index at unchanged cost.
    n = cost.shape[0]
    while True:
        moved = False
        matched = sorted(assigned)
        unmatched = [i for i in range(n) if i not in assigned]
        for i in matched:
            j = assigned[i]
            for i2 in unmatched:
                if i2 >= i:
                    break
                if cost[i2, j] == cost[i, j]:
                    del assigned[i]
                    assigned[i2] = j
                    moved = True
                    break
            if moved:
                break
        if moved:
            continue
        for a in range(len(matched)):
            for b in range(a + 1, len(matched)):
                i1, i2 = matched[a], matched[b]
                j1, j2 = assigned[i1], assigned[i2]
                if j2 < j1 and cost[i1, j1] + cost[i2, j2] == cost[i1, j2] + cost[i2, j1]:
                    assigned[i1], assigned[i2] = j2, j1
                    moved = True
                    break
            if moved:
                break
        if not moved:
            return sorted(assigned.items())


def match_instances(
    head_maps: np.ndarray,
    gaze_maps: np.ndarray,
    oof_probs: np.ndarray,
    gts: GroundTruthMaps,
    weights: MatchWeights = MatchWeights(),
) -> Assignment:
    """Match N proposals against the scene's M ground-truth instances.

    Requires M <= N; scenes that exceed the proposal budget raise
    CapacityExceededError so the caller can regenerate or skip them.
    """
    n = int(head_maps.shape[0])
    m = gts.num_instances
    if m > n:
        raise CapacityExceededError(
            f"scene has {m} ground-truth instances but the model emits only {n} proposals"
        )
    if m == 0:
        return Assignment(pairs=(), total_cost=0.0)
    cost = build_cost_matrix(head_maps, gaze_maps, oof_probs, gts, weights)
    return hungarian(cost)
