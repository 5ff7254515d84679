"""Multi-task fine-tuning: detection on bright data plus three
self-supervised terms pulling the domains' features together.

Detection labels are only ever read for bright images; dark images enter
the objective exclusively through their brightened versions and the
self-supervised losses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from darkadapt.config import LossWeights, RunConfig
from darkadapt.contrastive import (
    ContrastiveEncoder,
    MoCoPair,
    NegativeQueue,
    ProjectionHead,
    loss_el_up,
    loss_h_dh,
)
from darkadapt.data import Domain, GroundTruthBox, Image, fork_rng
from darkadapt.degrade import DegradePipeline
from darkadapt.detector import (
    Detector,
    build_anchors,
    detection_loss,
    load_detector,
    pool_taps,
    save_detector,
)
from darkadapt.enhance import CurveEstimator, enhance
from darkadapt.exceptions import ContractViolation, StateError, TrainingError
from darkadapt.jigsaw import JigsawHeadSet, PermutationSet, gen_permutations, jigsaw_loss, make_puzzle


class EpochSampler:
    """Shuffled-epoch batch order.

    For the queue-based losses this guarantees an image's own key has
    left the queue (capacity permitting) before the image recurs, which
    with-replacement sampling cannot; stale self-keys among the negatives
    poison the objective at small corpus sizes.
    """

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        if n < 1 or batch < 1:
            raise ContractViolation("sampler needs a nonempty corpus and positive batch size")
        self.n = n
        self.batch = batch
        self.rng = rng
        self._order: list[int] = []

    def next(self) -> list[int]:
        while len(self._order) < self.batch:
            self._order.extend(self.rng.permutation(self.n).tolist())
        out, self._order = self._order[: self.batch], self._order[self.batch:]
        return out


@dataclass
class AdaptModules:
    """Everything multi_task_step touches, bundled."""

    detector: Detector
    jigsaw_heads: JigsawHeadSet
    pset: PermutationSet
    moco_hdh: MoCoPair
    moco_el: MoCoPair
    queue_hdh: NegativeQueue
    queue_el: NegativeQueue
    degrade_pipeline: DegradePipeline
    optimizer: torch.optim.Optimizer
    config: RunConfig
    iteration: int = 0
    rng_streams: dict = field(default_factory=dict)


def build_adapt_modules(detector: Detector, cfg: RunConfig, pipeline: DegradePipeline | None = None) -> AdaptModules:
    pset = gen_permutations(rng=fork_rng(cfg.seed, "permutations"))
    heads = JigsawHeadSet(list(cfg.detector.stage_channels))
    cc = cfg.contrastive
    moco_hdh = MoCoPair(
        ContrastiveEncoder(detector.backbone, ProjectionHead(cfg.detector.stage_channels[-1], cc.embedding_dim)),
        cc.momentum,
    )
    moco_el = MoCoPair(
        ContrastiveEncoder(detector.backbone, ProjectionHead(cfg.detector.stage_channels[-1], cc.embedding_dim)),
        cc.momentum,
    )
    params: dict[int, torch.nn.Parameter] = {}
    for module in (detector, heads, moco_hdh.query.projection, moco_el.query.projection):
        for p in module.parameters():
            params[id(p)] = p
    optimizer = torch.optim.SGD(
        list(params.values()),
        lr=cfg.optimizer.lr_first,
        momentum=cfg.optimizer.momentum,
        weight_decay=cfg.optimizer.weight_decay,
    )
    return AdaptModules(
        detector=detector,
        jigsaw_heads=heads,
        pset=pset,
        moco_hdh=moco_hdh,
        moco_el=moco_el,
        queue_hdh=NegativeQueue(cc.queue_capacity, cc.embedding_dim),
        queue_el=NegativeQueue(cc.queue_capacity, cc.embedding_dim),
        degrade_pipeline=pipeline or DegradePipeline(cfg.degrade),
        optimizer=optimizer,
        config=cfg,
    )


def _image_batch_tensor(images: list[Image]) -> torch.Tensor:
    shapes = {img.pixels.shape for img in images}
    if len(shapes) != 1:
        raise ContractViolation(f"detection batch mixes image shapes: {sorted(shapes)}")
    arr = np.stack([img.pixels.transpose(2, 0, 1) for img in images])
    return torch.from_numpy(arr).float()


def _gt_array(boxes: list[GroundTruthBox]) -> np.ndarray:
    return np.array([b.as_array() for b in boxes]) if boxes else np.zeros((0, 4))


def _random_square_crop(px: np.ndarray, side: int, rng: np.random.Generator) -> np.ndarray:
    h, w = px.shape[:2]
    if h < side or w < side:
        reps = ((side + h - 1) // h, (side + w - 1) // w, 1)
        px = np.tile(px, reps)
        h, w = px.shape[:2]
    y = int(rng.integers(h - side + 1))
    x = int(rng.integers(w - side + 1))
    return px[y:y + side, x:x + side]


def _puzzle_batch(
    images: list[Image],
    pset: PermutationSet,
    crop: int,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    rasters, labels = [], []
    for img in images:
        side = max(crop, pset.grid * pset.grid)
        cropped = _random_square_crop(img.pixels, side, rng)
        label = int(rng.integers(len(pset)))
        sample = make_puzzle(Image(cropped, img.domain, img.id), label, pset)
        rasters.append(sample.image.pixels.transpose(2, 0, 1))
        labels.append(sample.label)
    return (
        torch.from_numpy(np.stack(rasters)).float(),
        torch.tensor(labels, dtype=torch.long),
    )


def multi_task_step(
    batch_el: list[Image],
    batch_h: list[Image],
    labels_h: list[list[GroundTruthBox]],
    modules: AdaptModules,
    weights: LossWeights,
    batch_h_ssl: list[Image] | None = None,
) -> dict[str, float]:
    """One weighted optimization step over all active loss terms.

    Terms with a zero weight are skipped outright, so their parameters
    receive exactly zero gradient. The bright batch feeds both detection
    and the self-supervised terms unless a separate SSL batch is given.
    Returns the per-term breakdown.
    """
    cfg = modules.config
    rng = modules.rng_streams.setdefault("step", fork_rng(cfg.seed, "multi-task-step"))
    batch_h_ssl = batch_h if batch_h_ssl is None else batch_h_ssl
    terms: dict[str, torch.Tensor] = {}

    if weights.det > 0:
        if not batch_h:
            raise ContractViolation("detection term needs a nonempty bright batch")
        x = _image_batch_tensor(batch_h)
        _, cls_maps, reg_maps = modules.detector(x)
        cls_flat, reg_flat = modules.detector.flatten_predictions(cls_maps, reg_maps)
        anchors = build_anchors(x.shape[2], x.shape[3], cfg.detector.anchor_scale)
        per_image = []
        for b in range(len(batch_h)):
            loss_b, _ = detection_loss(
                cls_flat[b], reg_flat[b], anchors, _gt_array(labels_h[b]), cfg.detector
            )
            per_image.append(loss_b)
        terms["det"] = torch.stack(per_image).mean()

    if weights.el_h > 0:
        el_x, el_labels = _puzzle_batch(batch_el, modules.pset, cfg.jigsaw_crop, rng)
        h_x, h_labels = _puzzle_batch(batch_h_ssl, modules.pset, cfg.jigsaw_crop, rng)
        el_feats = pool_taps(modules.detector.backbone(el_x))
        h_feats = pool_taps(modules.detector.backbone(h_x))
        terms["el_h"] = jigsaw_loss(el_feats, el_labels, h_feats, h_labels, modules.jigsaw_heads)

    if weights.h_dh > 0:
        modules.moco_hdh.update_key()
        terms["h_dh"] = loss_h_dh(
            batch_h_ssl, modules.moco_hdh, modules.queue_hdh, cfg.contrastive, rng, modules.degrade_pipeline
        )

    if weights.el_up > 0:
        modules.moco_el.update_key()
        terms["el_up"] = loss_el_up(batch_el, modules.moco_el, modules.queue_el, cfg.contrastive, rng)

    for name, value in terms.items():
        if not torch.isfinite(value):
            raise TrainingError(modules.iteration, f"loss term {name!r} is not finite")

    weight_of = {"det": weights.det, "el_h": weights.el_h, "h_dh": weights.h_dh, "el_up": weights.el_up}
    total = sum(weight_of[name] * value for name, value in terms.items())
    if terms:
        modules.optimizer.zero_grad()
        total.backward()
        modules.optimizer.step()
    modules.iteration += 1

    breakdown = {name: float(value.detach()) for name, value in terms.items()}
    for name in ("det", "el_h", "h_dh", "el_up"):
        breakdown.setdefault(name, 0.0)
    breakdown["total"] = float(total.detach()) if terms else 0.0
    return breakdown


def train_adapt(
    cfg: RunConfig,
    pretrained_path: str | Path,
    bright: list[tuple[Image, list[GroundTruthBox]]],
    dark: list[Image],
    enhancer: CurveEstimator | None,
    out_dir: str | Path | None = None,
    iterations: int | None = None,
) -> tuple[Detector, list[dict]]:
    """Fine-tune a pretrained detector against the unlabeled dark domain.

    Dark images are brightened once up front with the frozen enhancer
    (or used raw when no enhancer is given); bright images keep their
    labels. Loss logs are returned and, when an output directory is
    given, streamed to ``losses.jsonl``.
    """
    pretrained_path = Path(pretrained_path)
    if not pretrained_path.exists():
        raise StateError(f"pretrained detector checkpoint not found: {pretrained_path}")
    if not bright:
        raise ContractViolation("adaptation needs labeled bright images")
    if not dark:
        raise ContractViolation("adaptation needs unlabeled dark images")
    total_iters = cfg.adapt_iterations if iterations is None else iterations

    torch.manual_seed(int(fork_rng(cfg.seed, "adapt-torch").integers(2 ** 31)))
    detector = load_detector(pretrained_path)
    detector.weights_loaded = True
    modules = build_adapt_modules(detector, cfg)

    batch_rng = fork_rng(cfg.seed, "adapt-batches")
    ssl_h_sampler = EpochSampler(len(bright), cfg.ssl_batch_size, fork_rng(cfg.seed, "adapt-ssl-h"))
    ssl_el_sampler = EpochSampler(len(dark), cfg.ssl_batch_size, fork_rng(cfg.seed, "adapt-ssl-el"))
    el_images = [enhance(enhancer, img) for img in dark] if enhancer is not None else list(dark)

    history: list[dict] = []
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "losses.jsonl"
        log_path.write_text("", encoding="utf-8")

    w = cfg.weights
    for it in range(total_iters):
        lr = cfg.optimizer.lr_at(it, total_iters)
        for group in modules.optimizer.param_groups:
            group["lr"] = lr
        bid = batch_rng.integers(len(bright), size=cfg.batch_size)
        batch_h_det = [bright[i][0] for i in bid]
        labels_h = [bright[i][1] for i in bid]
        batch_h_ssl = [bright[i][0] for i in ssl_h_sampler.next()]
        batch_el = [el_images[i] for i in ssl_el_sampler.next()]

        breakdown = multi_task_step(batch_el, batch_h_det, labels_h, modules, w, batch_h_ssl=batch_h_ssl)
        entry = {"iteration": it, "lr": lr, **breakdown}
        history.append(entry)
        if log_path is not None:
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    if out_dir is not None:
        save_detector(detector, Path(out_dir) / "adapted.pt")
    return detector, history


# ---------------------------------------------------------------------------
# Bright-domain pretraining


def pretrain_detector(
    cfg: RunConfig,
    bright: list[tuple[Image, list[GroundTruthBox]]],
    iterations: int,
    lr: float = 1e-3,
    out_path: str | Path | None = None,
) -> tuple[Detector, list[dict]]:
    """Train the detector from scratch on labeled bright data.

    Uses Adam for fast convergence at desk scale; the adaptation stage
    proper sticks to the momentum-SGD schedule.
    """
    if not bright:
        raise ContractViolation("pretraining needs labeled bright images")
    torch.manual_seed(int(fork_rng(cfg.seed, "pretrain-torch").integers(2 ** 31)))
    detector = Detector(cfg.detector)
    optimizer = torch.optim.Adam(detector.parameters(), lr=lr)
    rng = fork_rng(cfg.seed, "pretrain-batches")
    history: list[dict] = []
    for it in range(iterations):
        idx = rng.integers(len(bright), size=cfg.batch_size)
        batch = [bright[i][0] for i in idx]
        labels = [bright[i][1] for i in idx]
        x = _image_batch_tensor(batch)
        _, cls_maps, reg_maps = detector(x)
        cls_flat, reg_flat = detector.flatten_predictions(cls_maps, reg_maps)
        anchors = build_anchors(x.shape[2], x.shape[3], cfg.detector.anchor_scale)
        losses = []
        for b in range(len(batch)):
            loss_b, _ = detection_loss(cls_flat[b], reg_flat[b], anchors, _gt_array(labels[b]), cfg.detector)
            losses.append(loss_b)
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            raise TrainingError(it, "pretraining loss is not finite")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append({"iteration": it, "det": float(loss.detach())})
    detector.weights_loaded = True
    if out_path is not None:
        save_detector(detector, out_path)
    return detector, history
