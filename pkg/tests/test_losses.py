import math

import numpy as np
import pytest
import torch

from gazedet.gtgen import Annotation, make_ground_truth
from gazedet.losses import (
    BCE_EPS,
    LossBreakdown,
    LossWeights,
    detection_mse,
    heatmap_mse,
    oof_bce,
    total_loss,
)
from gazedet.matching import Assignment
from gazedet.model import ProposalSet


def brute_heatmap_mse(preds, gts):
    m = len(preds)
    acc = 0.0
    for k in range(m):
        h, w = preds[k].shape
        for i in range(h):
            for j in range(w):
                acc += (float(gts[k][i, j]) - float(preds[k][i, j])) ** 2
    return acc / (m * h * w)


def brute_oof_bce(probs, labels):
    acc = 0.0
    for p, y in zip(probs, labels):
        p = min(max(float(p), BCE_EPS), 1.0 - BCE_EPS)
        acc += float(y) * math.log(p) + (1.0 - float(y)) * math.log(1.0 - p)
    return -acc / len(probs)


class TestHeatmapMse:
    def test_identical_is_zero(self):
        maps = np.random.default_rng(0).random((3, 8, 8))
        assert float(heatmap_mse(maps, maps.copy())) == 0.0

    def test_zero_vs_one(self):
        pred = np.zeros((1, 64, 64))
        gt = np.ones((1, 64, 64))
        assert float(heatmap_mse(pred, gt)) == pytest.approx(1.0)

    def test_half_vs_one(self):
        pred = np.full((1, 64, 64), 0.5)
        gt = np.ones((1, 64, 64))
        assert float(heatmap_mse(pred, gt)) == pytest.approx(0.25)

    def test_empty_convention(self):
        assert heatmap_mse([], []) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            m = int(rng.integers(1, 4))
            shape = (m, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
            preds = rng.random(shape)
            gts = rng.random(shape)
            a = float(heatmap_mse(preds, gts))
            b = brute_heatmap_mse(preds, gts)
            assert abs(a - b) <= 1e-10 * max(abs(b), 1e-30)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        preds = rng.random((4, 6, 6))
        gts = rng.random((4, 6, 6))
        perm = [2, 0, 3, 1]
        assert float(heatmap_mse(preds, gts)) == pytest.approx(
            float(heatmap_mse(preds[perm], gts[perm])), rel=1e-12
        )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            heatmap_mse(np.zeros((2, 4, 4)), np.zeros((2, 5, 5)))
        with pytest.raises(ValueError):
            heatmap_mse(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))


class TestDetectionMse:
    def test_identical(self):
        m = np.random.default_rng(0).random((64, 64))
        assert float(detection_mse(m, m.copy())) == 0.0

    def test_single_pixel(self):
        pred = np.zeros((64, 64))
        gt = np.zeros((64, 64))
        gt[10, 20] = 1.0
        assert float(detection_mse(pred, gt)) == pytest.approx(1.0 / 4096)

    def test_uniform_offset(self):
        gt = np.random.default_rng(3).random((64, 64))
        assert float(detection_mse(gt + 0.1, gt)) == pytest.approx(0.01, rel=1e-6)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            shape = (int(rng.integers(2, 7)), int(rng.integers(2, 7)))
            pred, gt = rng.random(shape), rng.random(shape)
            brute = sum(
                (float(gt[i, j]) - float(pred[i, j])) ** 2 for i in range(shape[0]) for j in range(shape[1])
            ) / (shape[0] * shape[1])
            assert abs(float(detection_mse(pred, gt)) - brute) <= 1e-10 * max(brute, 1e-30)


class TestOofBce:
    def test_half_probability(self):
        assert float(oof_bce([0.5, 0.5], [1.0, 0.0])) == pytest.approx(math.log(2.0), rel=1e-9)

    def test_perfect_prediction_floor(self):
        assert float(oof_bce([1.0, 0.0], [1.0, 0.0])) <= -math.log(1.0 - BCE_EPS) + 1e-12

    def test_example_pair(self):
        val = float(oof_bce([0.9, 0.1], [1.0, 0.0]))
        assert val == pytest.approx(-(math.log(0.9) + math.log(0.9)) / 2.0, rel=1e-9)
        assert val == pytest.approx(0.1054, abs=1e-4)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            n = int(rng.integers(1, 8))
            probs = rng.random(n)
            labels = rng.integers(0, 2, n).astype(float)
            a = float(oof_bce(probs, labels))
            b = brute_oof_bce(probs, labels)
            assert abs(a - b) <= 1e-10 * max(abs(b), 1e-30)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            oof_bce([0.5], [1.0, 0.0])


def _proposals_matching_gts(gts, n_proposals=4, logit_hi=20.0):
    heads = np.zeros((n_proposals,) + gts.detection_map.shape)
    gazes = np.zeros_like(heads)
    conns = np.zeros_like(heads)
    logits = np.full(n_proposals, logit_hi)  # unmatched slots predict out-of-frame
    for k in range(gts.num_instances):
        heads[k] = gts.head_maps[k]
        gazes[k] = gts.gaze_maps[k]
        conns[k] = gts.connection_maps[k]
        logits[k] = logit_hi if gts.oof_labels[k] else -logit_hi
    return ProposalSet(
        head_maps=torch.as_tensor(heads),
        gaze_maps=torch.as_tensor(gazes),
        connection_maps=torch.as_tensor(conns),
        oof_logits=torch.as_tensor(logits),
    )


def _scene():
    anns = [
        Annotation(head_box=(0.1, 0.1, 0.3, 0.3), gaze_point=(0.8, 0.8), out_of_frame=False),
        Annotation(head_box=(0.6, 0.2, 0.8, 0.4), gaze_point=None, out_of_frame=True),
    ]
    return make_ground_truth(anns)


class TestTotalLoss:
    def test_perfect_prediction_is_negligible(self):
        gts = _scene()
        props = _proposals_matching_gts(gts)
        assignment = Assignment(pairs=((0, 0), (1, 1)), total_cost=0.0)
        bd = total_loss(props, torch.as_tensor(gts.detection_map), gts, assignment)
        assert float(bd.total) <= 1e-6

    def test_composition_is_exact(self):
        gts = _scene()
        rng = np.random.default_rng(0)
        props = ProposalSet(
            head_maps=torch.as_tensor(rng.random((4, 64, 64))),
            gaze_maps=torch.as_tensor(rng.random((4, 64, 64))),
            connection_maps=torch.as_tensor(rng.random((4, 64, 64))),
            oof_logits=torch.as_tensor(rng.normal(size=4)),
        )
        det = torch.as_tensor(rng.random((64, 64)))
        assignment = Assignment(pairs=((2, 0), (0, 1)), total_cost=1.0)
        w = LossWeights(lambda_h=0.7, lambda_g=1.3, lambda_c=0.2, lambda_o=2.0, lambda_det=0.9)
        bd = total_loss(props, det, gts, assignment, w)
        expected = (
            w.lambda_h * bd.l_h
            + w.lambda_g * bd.l_g
            + w.lambda_c * bd.l_c
            + w.lambda_o * bd.l_o
            + w.lambda_det * bd.l_det
        )
        assert float(bd.total) == float(expected)

    def test_zeroing_lambda_c_removes_connection_term(self):
        gts = _scene()
        rng = np.random.default_rng(1)
        props = ProposalSet(
            head_maps=torch.as_tensor(rng.random((4, 64, 64))),
            gaze_maps=torch.as_tensor(rng.random((4, 64, 64))),
            connection_maps=torch.as_tensor(rng.random((4, 64, 64))),
            oof_logits=torch.as_tensor(rng.normal(size=4)),
        )
        det = torch.as_tensor(rng.random((64, 64)))
        assignment = Assignment(pairs=((0, 0), (1, 1)), total_cost=0.0)
        full = total_loss(props, det, gts, assignment, LossWeights())
        no_c = total_loss(props, det, gts, assignment, LossWeights(lambda_c=0.0))
        assert float(no_c.total) == pytest.approx(float(full.total) - float(full.l_c), rel=1e-9)
        assert float(no_c.l_c) == float(full.l_c)  # term still reported, just unweighted

    def test_doubling_weights_doubles_total(self):
        gts = _scene()
        rng = np.random.default_rng(2)
        props = ProposalSet(
            head_maps=torch.as_tensor(rng.random((3, 64, 64))),
            gaze_maps=torch.as_tensor(rng.random((3, 64, 64))),
            connection_maps=torch.as_tensor(rng.random((3, 64, 64))),
            oof_logits=torch.as_tensor(rng.normal(size=3)),
        )
        det = torch.as_tensor(rng.random((64, 64)))
        assignment = Assignment(pairs=((0, 0), (1, 1)), total_cost=0.0)
        one = total_loss(props, det, gts, assignment, LossWeights())
        two = total_loss(
            props, det, gts, assignment, LossWeights(2.0, 5.0, 2.0, 2.0, 2.0)
        )
        assert float(two.total) == pytest.approx(2.0 * float(one.total), rel=1e-12)

    def test_empty_scene_trains_det_and_flags_only(self):
        gts = make_ground_truth([])
        rng = np.random.default_rng(3)
        props = ProposalSet(
            head_maps=torch.as_tensor(rng.random((4, 64, 64))),
            gaze_maps=torch.as_tensor(rng.random((4, 64, 64))),
            connection_maps=torch.as_tensor(rng.random((4, 64, 64))),
            oof_logits=torch.zeros(4, dtype=torch.float64),
        )
        det = torch.as_tensor(rng.random((64, 64)))
        bd = total_loss(props, det, gts, Assignment(pairs=(), total_cost=0.0))
        assert float(bd.l_h) == 0.0 and float(bd.l_g) == 0.0 and float(bd.l_c) == 0.0
        assert float(bd.l_o) == pytest.approx(math.log(2.0), rel=1e-9)  # sigmoid(0) vs target 1
        assert float(bd.l_det) > 0.0

    def test_out_of_frame_instances_supervise_zero_maps(self):
        anns = [Annotation(head_box=(0.4, 0.4, 0.6, 0.6), gaze_point=None, out_of_frame=True)]
        gts = make_ground_truth(anns)
        props = ProposalSet(
            head_maps=torch.as_tensor(gts.head_maps.astype(np.float64)),
            gaze_maps=torch.full((1, 64, 64), 0.5, dtype=torch.float64),
            connection_maps=torch.full((1, 64, 64), 0.5, dtype=torch.float64),
            oof_logits=torch.as_tensor([30.0]),
        )
        bd = total_loss(props, torch.as_tensor(gts.detection_map), gts, Assignment(((0, 0),), 0.0))
        assert float(bd.l_h) == 0.0
        assert float(bd.l_g) == pytest.approx(0.25)
        assert float(bd.l_c) == pytest.approx(0.25)

    def test_heatmap_gradient_is_scaled_residual(self):
        gts = _scene()
        m = gts.num_instances
        preds = torch.rand((m, 64, 64), dtype=torch.float64, requires_grad=True)
        loss = heatmap_mse(preds, gts.head_maps)
        loss.backward()
        expected = 2.0 * (preds.detach().numpy() - gts.head_maps) / (m * 64 * 64)
        np.testing.assert_allclose(preds.grad.numpy(), expected, rtol=1e-10, atol=1e-14)

    def test_total_loss_pixel_gradients(self):
        # gaze pixels: 2*lambda_g*residual/(M*mn) over matched pairs; head
        # pixels: 2*lambda_h*residual/(N*mn), the sum running over all N
        # proposals because unmatched head maps are supervised toward zero
        gts = _scene()
        rng = np.random.default_rng(4)
        n, m = 4, gts.num_instances
        head = torch.tensor(rng.random((n, 64, 64)), requires_grad=True)
        gaze = torch.tensor(rng.random((n, 64, 64)), requires_grad=True)
        props = ProposalSet(
            head_maps=head,
            gaze_maps=gaze,
            connection_maps=torch.tensor(rng.random((n, 64, 64))),
            oof_logits=torch.tensor(rng.normal(size=n)),
        )
        det = torch.as_tensor(rng.random((64, 64)))
        w = LossWeights()
        assignment = Assignment(pairs=((1, 0), (3, 1)), total_cost=0.0)
        bd = total_loss(props, det, gts, assignment, w)
        bd.total.backward()

        gaze_expected = np.zeros((n, 64, 64))
        for i, j in assignment.pairs:
            gaze_expected[i] = (
                2.0 * w.lambda_g * (gaze.detach().numpy()[i] - gts.gaze_maps[j]) / (m * 64 * 64)
            )
        np.testing.assert_allclose(gaze.grad.numpy(), gaze_expected, rtol=1e-9, atol=1e-15)

        head_targets = np.zeros((n, 64, 64))
        for i, j in assignment.pairs:
            head_targets[i] = gts.head_maps[j]
        head_expected = 2.0 * w.lambda_h * (head.detach().numpy() - head_targets) / (n * 64 * 64)
        np.testing.assert_allclose(head.grad.numpy(), head_expected, rtol=1e-9, atol=1e-15)

    def test_total_is_nonnegative(self):
        gts = _scene()
        rng = np.random.default_rng(6)
        for _ in range(5):
            props = ProposalSet(
                head_maps=torch.as_tensor(rng.random((4, 64, 64))),
                gaze_maps=torch.as_tensor(rng.random((4, 64, 64))),
                connection_maps=torch.as_tensor(rng.random((4, 64, 64))),
                oof_logits=torch.as_tensor(rng.normal(size=4)),
            )
            det = torch.as_tensor(rng.random((64, 64)))
            bd = total_loss(props, det, gts, Assignment(pairs=((0, 0), (1, 1)), total_cost=0.0))
            assert float(bd.total) >= 0.0

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_h=-1.0)
        with pytest.raises(ValueError):
            LossWeights(lambda_det=float("inf"))

    def test_breakdown_field_order_matches_log_columns(self):
        assert LossBreakdown.field_order() == ("l_h", "l_g", "l_c", "l_det", "l_o", "total")
