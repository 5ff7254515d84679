import numpy as np
import pytest
import torch

from darkadapt.data import Domain, Image
from darkadapt.detector import (
    STRIDES,
    Backbone,
    Detector,
    DetectorConfig,
    build_anchors,
    decode_boxes,
    detect,
    detection_loss,
    encode_boxes,
    iou_matrix,
    match_anchors,
    nms,
    load_detector,
    save_detector,
    tap_shapes,
)
from darkadapt.exceptions import ContractViolation, StateError

SMALL = DetectorConfig(stage_channels=(4, 8, 8, 8, 8, 8))


class TestBackbone:
    def test_six_taps_halving(self):
        bb = Backbone(SMALL)
        taps = bb(torch.zeros(1, 3, 64, 64))
        assert len(taps) == len(STRIDES)
        sizes = [t.shape[2] for t in taps]
        assert sizes == [16, 8, 4, 2, 1, 1]
        for a, b in zip(sizes, sizes[1:]):
            assert b == max(1, (a + 1) // 2)

    def test_forward_call_counting(self):
        bb = Backbone(SMALL)
        assert bb.forward_calls == 0
        bb(torch.zeros(1, 3, 32, 32))
        bb(torch.zeros(1, 3, 32, 32))
        assert bb.forward_calls == 2

    def test_tap_shapes_match_forward(self):
        bb = Backbone(SMALL)
        taps = bb(torch.zeros(1, 3, 96, 80))
        assert [(t.shape[2], t.shape[3]) for t in taps] == tap_shapes(96, 80)


class TestAnchors:
    def test_anchor_count(self):
        anchors = build_anchors(64, 64, anchor_scale=3.0)
        expected = sum(h * w for h, w in tap_shapes(64, 64))
        assert anchors.shape == (expected, 4)

    def test_encode_decode_round_trip(self, rng):
        anchors = build_anchors(64, 64, 3.0)[:40]
        boxes = anchors + rng.uniform(-3, 3, size=anchors.shape)
        boxes[:, 2] = np.maximum(boxes[:, 2], boxes[:, 0] + 2)
        boxes[:, 3] = np.maximum(boxes[:, 3], boxes[:, 1] + 2)
        deltas = encode_boxes(anchors, boxes)
        back = decode_boxes(anchors, deltas)
        assert np.abs(back - boxes).max() < 1e-9

    def test_no_orphan_positives(self, rng):
        cfg = SMALL
        anchors = build_anchors(64, 64, 3.0)
        for _ in range(20):
            n = int(rng.integers(1, 5))
            gt = []
            for _ in range(n):
                x, y = rng.uniform(0, 40, size=2)
                s = rng.uniform(8, 24)
                gt.append([x, y, x + s, y + s])
            gt = np.array(gt)
            labels, matched = match_anchors(anchors, gt, cfg.match_pos_iou, cfg.match_neg_iou)
            iou = iou_matrix(anchors, gt)
            for g in range(n):
                if iou[:, g].max() >= cfg.match_pos_iou:
                    assert np.any((labels == 1) & (matched == g))

    def test_zero_anchor_contract(self):
        with pytest.raises(ContractViolation):
            match_anchors(np.zeros((0, 4)), np.array([[0, 0, 4, 4]]), 0.5, 0.4)


class TestNms:
    def test_single_box_kept(self):
        assert nms(np.array([[0, 0, 4, 4.0]]), np.array([0.7]), 0.5) == [0]

    def test_disjoint_kept(self):
        boxes = np.array([[0, 0, 4, 4.0], [10, 10, 14, 14.0]])
        assert sorted(nms(boxes, np.array([0.9, 0.1]), 0.0)) == [0, 1]

    def test_identical_boxes_keeps_top_score(self):
        boxes = np.array([[0, 0, 4, 4.0], [0, 0, 4, 4.0]])
        assert nms(boxes, np.array([0.8, 0.9]), 0.5) == [1]

    def test_chain_suppression(self):
        # A overlaps B, B overlaps C, A disjoint from C -> keep {A, C}
        a = [0.0, 0.0, 10.0, 10.0]
        b = [5.0, 0.0, 15.0, 10.0]
        c = [10.5, 0.0, 20.5, 10.0]
        boxes = np.array([a, b, c])
        scores = np.array([0.9, 0.8, 0.7])
        assert iou_matrix(boxes[:1], boxes[1:2])[0, 0] > 0.25
        assert iou_matrix(boxes[1:2], boxes[2:])[0, 0] > 0.25
        assert iou_matrix(boxes[:1], boxes[2:])[0, 0] == 0.0
        kept = nms(boxes, scores, 0.25)
        assert kept == [0, 2]

    def test_tie_breaks_by_lower_index(self):
        boxes = np.array([[0, 0, 4, 4.0], [0, 0, 4, 4.0], [0, 0, 4, 4.0]])
        kept = nms(boxes, np.array([0.5, 0.5, 0.5]), 0.5)
        assert kept == [0]

    def test_antichain_invariant(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 30))
            xy = rng.uniform(0, 40, size=(n, 2))
            wh = rng.uniform(4, 20, size=(n, 2))
            boxes = np.concatenate([xy, xy + wh], axis=1)
            scores = rng.uniform(0, 1, size=n)
            kept = nms(boxes, scores, 0.4)
            for i in kept:
                for j in kept:
                    if i != j:
                        assert iou_matrix(boxes[i][None], boxes[j][None])[0, 0] <= 0.4

    def test_length_contract(self):
        with pytest.raises(ContractViolation):
            nms(np.zeros((2, 4)), np.zeros(3), 0.5)


class TestDetectionLoss:
    def test_no_gt_confident_negatives(self):
        anchors = build_anchors(32, 32, 3.0)
        n = anchors.shape[0]
        cls = torch.zeros(n, 2)
        cls[:, 0] = 12.0  # strongly background
        loss, parts = detection_loss(cls, torch.zeros(n, 4), anchors, np.zeros((0, 4)), SMALL)
        assert float(loss.detach()) < 1e-3
        assert parts["num_pos"] == 0

    def test_exact_regression_targets_zero_term(self):
        anchors = np.array([[10.0, 10.0, 26.0, 26.0]])
        gt = np.array([[12.0, 11.0, 30.0, 27.0]])
        enc = torch.from_numpy(encode_boxes(anchors, gt)).float()
        cls = torch.tensor([[0.0, 9.0]])
        loss, parts = detection_loss(cls, enc, anchors, gt, SMALL)
        assert parts["reg"] == 0.0
        assert parts["num_pos"] == 1

    @pytest.mark.parametrize("offset,expected", [(0.5, 0.125), (2.0, 1.5)])
    def test_smooth_l1_closed_form(self, offset, expected):
        # single matched anchor; regression off by `offset` in one coordinate
        anchors = np.array([[10.0, 10.0, 26.0, 26.0]])
        gt = np.array([[10.0, 10.0, 26.0, 26.0]])
        reg = torch.zeros(1, 4)
        reg[0, 0] = offset
        cls = torch.tensor([[0.0, 30.0]])
        loss, parts = detection_loss(cls, reg, anchors, gt, SMALL)
        assert abs(parts["reg"] - expected) < 1e-6

    def test_gradient_matches_finite_differences(self):
        anchors = np.array([[0.0, 0.0, 16.0, 16.0], [20.0, 20.0, 36.0, 36.0]])
        gt = np.array([[1.0, 1.0, 17.0, 17.0]])
        cls0 = torch.tensor([[0.3, 0.2], [0.1, -0.4]], dtype=torch.double)
        reg0 = torch.tensor([[0.1, -0.2, 0.05, 0.0], [0.0, 0.0, 0.0, 0.0]], dtype=torch.double)
        cls = cls0.clone().requires_grad_(True)
        reg = reg0.clone().requires_grad_(True)
        loss, _ = detection_loss(cls, reg, anchors, gt, SMALL)
        loss.backward()
        eps = 1e-6
        for tensor, grad, base in ((cls, cls.grad, cls0), (reg, reg.grad, reg0)):
            it = np.ndindex(*base.shape)
            for idx in it:
                p = base.clone()
                p[idx] += eps
                m = base.clone()
                m[idx] -= eps
                if tensor is cls:
                    lp, _ = detection_loss(p, reg0, anchors, gt, SMALL)
                    lm, _ = detection_loss(m, reg0, anchors, gt, SMALL)
                else:
                    lp, _ = detection_loss(cls0, p, anchors, gt, SMALL)
                    lm, _ = detection_loss(cls0, m, anchors, gt, SMALL)
                fd = (float(lp) - float(lm)) / (2 * eps)
                assert np.isclose(float(grad[idx]), fd, rtol=1e-3, atol=1e-9)


class TestDetect:
    def _ready_detector(self):
        torch.manual_seed(0)
        det = Detector(SMALL)
        det.weights_loaded = True
        return det

    def test_unloaded_weights_state_error(self, rng):
        det = Detector(SMALL)
        img = Image(rng.uniform(0, 1, (32, 32, 3)).astype(np.float32), Domain.H, "x")
        with pytest.raises(StateError):
            detect(det, img)

    def test_threshold_above_one_empty(self, rng):
        det = self._ready_detector()
        cfg = DetectorConfig(stage_channels=SMALL.stage_channels, score_threshold=1.01)
        img = Image(rng.uniform(0, 1, (32, 32, 3)).astype(np.float32), Domain.H, "x")
        assert len(detect(det, img, cfg)) == 0

    def test_deterministic(self, rng):
        det = self._ready_detector()
        cfg = DetectorConfig(stage_channels=SMALL.stage_channels, score_threshold=0.0)
        img = Image(rng.uniform(0, 1, (32, 32, 3)).astype(np.float32), Domain.H, "x")
        a = detect(det, img, cfg)
        b = detect(det, img, cfg)
        assert len(a) == len(b)
        for da, db in zip(a.detections, b.detections):
            assert da.score == db.score
            assert np.array_equal(da.box, db.box)

    def test_output_contracts(self, rng):
        det = self._ready_detector()
        cfg = DetectorConfig(stage_channels=SMALL.stage_channels, score_threshold=0.0)
        img = Image(rng.uniform(0, 1, (32, 40, 3)).astype(np.float32), Domain.H, "x")
        out = detect(det, img, cfg)
        scores = [d.score for d in out.detections]
        assert scores == sorted(scores, reverse=True)
        for d in out.detections:
            x1, y1, x2, y2 = d.box
            assert 0 <= x1 < x2 <= 40
            assert 0 <= y1 < y2 <= 32

    def test_checkpoint_round_trip(self, tmp_path):
        det = self._ready_detector()
        save_detector(det, tmp_path / "d.pt")
        back = load_detector(tmp_path / "d.pt")
        assert back.weights_loaded
        assert back.config == det.config
        for a, b in zip(det.state_dict().values(), back.state_dict().values()):
            assert torch.equal(a, b)
