"""Small anchor-based multi-scale face detector with six feature taps.

The backbone exposes one feature map per stride in {4, 8, 16, 32, 64,
128}; the same taps feed the detection heads, the puzzle classifiers, and
the contrastive projection, so auxiliary losses shape exactly the
features the detector uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from darkadapt import checkpoint
from darkadapt.data import Image, assert_valid_image
from darkadapt.exceptions import ContractViolation, StateError

STRIDES = (4, 8, 16, 32, 64, 128)


@dataclass
class DetectorConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 64, 64, 64)
    anchor_scale: float = 3.0  # anchor side = anchor_scale * stride
    input_mean: float = 0.5   # fixed dataset standardization; dark inputs
    input_std: float = 0.25   # land far below the mean, as they should
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    match_pos_iou: float = 0.5
    match_neg_iou: float = 0.4
    hnm_ratio: int = 3

    def __post_init__(self):
        if len(self.stage_channels) != len(STRIDES):
            raise ContractViolation(f"need {len(STRIDES)} stage widths, got {len(self.stage_channels)}")
        if not (0 <= self.match_neg_iou <= self.match_pos_iou <= 1):
            raise ContractViolation("matcher thresholds must satisfy 0 <= neg <= pos <= 1")
        if self.input_std <= 0:
            raise ContractViolation("input_std must be positive")


def _block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Six plain conv stages; the output list is one tap per stride.

    No per-sample normalization layers: illumination shifts must reach
    the features, since recovering from them is the whole exercise.
    """

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.input_mean = config.input_mean
        self.input_std = config.input_std
        c = config.stage_channels
        self.stage1 = nn.Sequential(_block(3, c[0], 2), _block(c[0], c[0], 2))
        self.later = nn.ModuleList(
            [_block(c[i - 1], c[i], 2) for i in range(1, len(c))]
        )
        self.forward_calls = 0  # instrumentation for single-pass assertions

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        self.forward_calls += 1
        x = (x - self.input_mean) / self.input_std
        taps = [self.stage1(x)]
        for stage in self.later:
            taps.append(stage(taps[-1]))
        sizes = [t.shape[2] for t in taps]
        for a, b in zip(sizes, sizes[1:]):
            if b != max(1, (a + 1) // 2):
                raise ContractViolation(f"tap sizes do not halve monotonically: {sizes}")
        return taps


def pool_taps(taps: list[torch.Tensor]) -> list[torch.Tensor]:
    """Global average pooling per tap, (B, C, h, w) -> (B, C)."""
    return [t.mean(dim=(2, 3)) for t in taps]


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig | None = None):
        super().__init__()
        self.config = config or DetectorConfig()
        self.backbone = Backbone(self.config)
        self.cls_heads = nn.ModuleList(
            [nn.Conv2d(c, 2, 1) for c in self.config.stage_channels]
        )
        self.reg_heads = nn.ModuleList(
            [nn.Conv2d(c, 4, 1) for c in self.config.stage_channels]
        )
        self.weights_loaded = False

    def forward(self, x: torch.Tensor):
        taps = self.backbone(x)
        cls_maps = [head(t) for head, t in zip(self.cls_heads, taps)]
        reg_maps = [head(t) for head, t in zip(self.reg_heads, taps)]
        return taps, cls_maps, reg_maps

    def flatten_predictions(self, cls_maps, reg_maps):
        """Per-anchor logits/regressions in anchor-grid order, (B, A, .)."""
        b = cls_maps[0].shape[0]
        cls_flat = torch.cat(
            [m.permute(0, 2, 3, 1).reshape(b, -1, 2) for m in cls_maps], dim=1
        )
        reg_flat = torch.cat(
            [m.permute(0, 2, 3, 1).reshape(b, -1, 4) for m in reg_maps], dim=1
        )
        return cls_flat, reg_flat


# ---------------------------------------------------------------------------
# Anchors


def tap_shapes(height: int, width: int) -> list[tuple[int, int]]:
    return [((height + s - 1) // s, (width + s - 1) // s) for s in STRIDES]


def build_anchors(height: int, width: int, anchor_scale: float) -> np.ndarray:
    """Square anchors, one per feature-map cell, tiled over every tap."""
    grids = []
    for stride, (mh, mw) in zip(STRIDES, tap_shapes(height, width)):
        side = anchor_scale * stride
        ys = (np.arange(mh) + 0.5) * stride
        xs = (np.arange(mw) + 0.5) * stride
        cy, cx = np.meshgrid(ys, xs, indexing="ij")
        grid = np.stack(
            [cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2], axis=-1
        ).reshape(-1, 4)
        grids.append(grid)
    return np.concatenate(grids, axis=0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) boxes in corner form."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / np.where(union > 0, union, 1.0)


def match_anchors(
    anchors: np.ndarray,
    gt: np.ndarray,
    pos_iou: float,
    neg_iou: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Label anchors 1/0/-1 (positive/negative/ignored) and pick their target.

    Every ground-truth box additionally claims its single best anchor, so a
    box that clears the positive threshold against any anchor is never left
    unmatched.
    """
    n = anchors.shape[0]
    if n == 0:
        raise ContractViolation("image produced zero anchors")
    labels = np.zeros(n, dtype=np.int64)
    matched = np.zeros(n, dtype=np.int64)
    if gt.shape[0] == 0:
        return labels, matched
    iou = iou_matrix(anchors, gt)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    matched = best_gt
    labels[best_iou >= pos_iou] = 1
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = -1
    for g in range(gt.shape[0]):
        a_star = int(iou[:, g].argmax())
        if iou[a_star, g] > 0:
            labels[a_star] = 1
            matched[a_star] = g
    return labels, matched


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    bcx = (boxes[:, 0] + boxes[:, 2]) / 2
    bcy = (boxes[:, 1] + boxes[:, 3]) / 2
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    return np.stack(
        [(bcx - acx) / aw, (bcy - acy) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1
    )


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    cx = deltas[:, 0] * aw + acx
    cy = deltas[:, 1] * ah + acy
    w = np.exp(np.clip(deltas[:, 2], -10, 10)) * aw
    h = np.exp(np.clip(deltas[:, 3], -10, 10)) * ah
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def detection_loss(
    cls_logits: torch.Tensor,
    reg_preds: torch.Tensor,
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    config: DetectorConfig,
) -> tuple[torch.Tensor, dict]:
    """Hard-negative-mined cross-entropy plus smooth-L1 box regression.

    Both terms are normalized by the positive match count (at least 1);
    negatives are mined at ``hnm_ratio`` per positive by descending loss.
    """
    labels, matched = match_anchors(anchors, gt_boxes, config.match_pos_iou, config.match_neg_iou)
    labels_t = torch.from_numpy(labels)
    pos_mask = labels_t == 1
    neg_mask = labels_t == 0
    n_pos = int(pos_mask.sum())
    denom = max(n_pos, 1)

    targets = torch.zeros_like(labels_t)
    targets[pos_mask] = 1
    ce = F.cross_entropy(cls_logits, targets, reduction="none")
    pos_loss = ce[pos_mask].sum()
    neg_losses = ce[neg_mask]
    n_neg = min(int(neg_mask.sum()), config.hnm_ratio * denom)
    hard_neg_loss = torch.topk(neg_losses, n_neg).values.sum() if n_neg > 0 else ce.new_zeros(())
    cls_loss = (pos_loss + hard_neg_loss) / denom

    if n_pos > 0:
        pos_idx = np.flatnonzero(labels == 1)
        enc = encode_boxes(anchors[pos_idx], gt_boxes[matched[pos_idx]])
        reg_targets = torch.from_numpy(enc).float()
        reg_loss = F.smooth_l1_loss(reg_preds[pos_mask], reg_targets, reduction="sum") / denom
    else:
        reg_loss = reg_preds.new_zeros(())

    total = cls_loss + reg_loss
    return total, {"cls": float(cls_loss.detach()), "reg": float(reg_loss.detach()), "num_pos": n_pos}


# ---------------------------------------------------------------------------
# Inference


@dataclass
class Detection:
    box: np.ndarray  # (4,) x1, y1, x2, y2
    score: float


@dataclass
class DetectionSet:
    image_id: str
    detections: list[Detection] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.detections)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy descending-score suppression; ties keep the lower index."""
    if boxes.shape[0] != scores.shape[0]:
        raise ContractViolation("boxes and scores must have equal lengths")
    if not (0.0 <= iou_threshold <= 1.0):
        raise ContractViolation(f"iou threshold must be in [0, 1], got {iou_threshold}")
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    suppressed = np.zeros(len(order), dtype=bool)
    for oi, idx in enumerate(order):
        if suppressed[oi]:
            continue
        kept.append(int(idx))
        rest = order[oi + 1:]
        if rest.size:
            ious = iou_matrix(boxes[idx][None], boxes[rest])[0]
            suppressed[oi + 1:] |= ious > iou_threshold
    return kept


def detect(detector: Detector, image: Image, config: DetectorConfig | None = None) -> DetectionSet:
    """Forward pass, score threshold, NMS; deterministic given weights."""
    cfg = config or detector.config
    if not detector.weights_loaded:
        raise StateError("detector weights have not been loaded or trained")
    assert_valid_image(image)
    h, w = image.pixels.shape[:2]
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(image.pixels.transpose(2, 0, 1)))[None].float()
        _, cls_maps, reg_maps = detector(x)
        cls_flat, reg_flat = detector.flatten_predictions(cls_maps, reg_maps)
        scores = torch.softmax(cls_flat[0], dim=1)[:, 1].numpy()
        deltas = reg_flat[0].numpy()
    anchors = build_anchors(h, w, cfg.anchor_scale)
    keep = scores >= cfg.score_threshold
    if not keep.any():
        return DetectionSet(image_id=image.id)
    boxes = decode_boxes(anchors[keep], deltas[keep].astype(np.float64))
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, w)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, h)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, kept_scores = boxes[valid], scores[keep][valid]
    kept_idx = nms(boxes, kept_scores, cfg.nms_iou)[: cfg.max_detections]
    dets = [Detection(box=boxes[i], score=float(kept_scores[i])) for i in kept_idx]
    dets.sort(key=lambda d: -d.score)
    return DetectionSet(image_id=image.id, detections=dets)


# ---------------------------------------------------------------------------
# Checkpointing


def save_detector(detector: Detector, path, extra_meta: dict | None = None) -> None:
    cfg = detector.config
    checkpoint.save_checkpoint(
        path,
        kind="detector",
        config={
            "stage_channels": list(cfg.stage_channels),
            "input_mean": cfg.input_mean,
            "input_std": cfg.input_std,
            "anchor_scale": cfg.anchor_scale,
            "score_threshold": cfg.score_threshold,
            "nms_iou": cfg.nms_iou,
            "max_detections": cfg.max_detections,
            "match_pos_iou": cfg.match_pos_iou,
            "match_neg_iou": cfg.match_neg_iou,
            "hnm_ratio": cfg.hnm_ratio,
        },
        state_dicts={"detector": detector.state_dict()},
        meta={"weights_loaded": detector.weights_loaded, **(extra_meta or {})},
    )


def load_detector(path) -> Detector:
    payload = checkpoint.load_checkpoint(path, expected_kind="detector")
    cfg_dict = dict(payload["config"])
    cfg_dict["stage_channels"] = tuple(cfg_dict["stage_channels"])
    detector = Detector(DetectorConfig(**cfg_dict))
    detector.load_state_dict(payload["state_dicts"]["detector"])
    detector.weights_loaded = bool(payload["meta"].get("weights_loaded", True))
    return detector
