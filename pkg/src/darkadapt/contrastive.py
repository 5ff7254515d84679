"""Momentum-queue contrastive learning across bright and degraded views.

A query encoder (the detector backbone plus a projection head) is trained
against keys from a slowly updated momentum copy, with a FIFO queue of
past keys as negatives. Cross-domain and single-domain terms share one
code path; they differ only in how the three views of each image (query,
key, queue-bound) are generated.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from darkadapt.data import Domain, Image
from darkadapt.exceptions import ContractViolation


@dataclass
class ContrastiveConfig:
    temperature: float = 0.2
    momentum: float = 0.999
    queue_capacity: int = 1024
    d_star_probability: float = 0.5
    embedding_dim: int = 128
    view_size: int = 64
    crop_min_scale: float = 0.6
    flip_prob: float = 0.5
    color_noise: float = 0.05

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractViolation(f"temperature must be positive, got {self.temperature}")
        if not (0.0 <= self.momentum <= 1.0):
            raise ContractViolation(f"momentum must be in [0, 1], got {self.momentum}")
        if self.queue_capacity < 1:
            raise ContractViolation(f"queue capacity must be >= 1, got {self.queue_capacity}")
        if not (0.0 <= self.d_star_probability <= 1.0):
            raise ContractViolation("d_star_probability must be a probability")


def normalize_embedding(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return F.normalize(v, p=2, dim=dim)


class NegativeQueue:
    """Fixed-capacity FIFO of detached unit-norm embeddings."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ContractViolation(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._entries = torch.zeros((0, dim), dtype=torch.float32)

    def __len__(self) -> int:
        return self._entries.shape[0]

    def entries(self) -> torch.Tensor:
        """Current negatives, oldest first."""
        return self._entries

    def enqueue(self, keys: torch.Tensor) -> None:
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ContractViolation(f"expected (B, {self.dim}) keys, got {tuple(keys.shape)}")
        merged = torch.cat([self._entries, keys.detach()], dim=0)
        if merged.shape[0] > self.capacity:
            merged = merged[-self.capacity:]
        self._entries = merged


def info_nce(
    q: torch.Tensor,
    k_pos: torch.Tensor,
    negatives: "NegativeQueue | torch.Tensor",
    temperature: float,
) -> torch.Tensor:
    """(N+1)-way classification loss of the positive against queued negatives.

    Accepts a single embedding pair (1-D tensors) or a batch (B, d); the
    batch form returns the mean. With an empty queue the ratio is exactly
    one and the loss is exactly zero.
    """
    if temperature <= 0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    neg = negatives.entries() if isinstance(negatives, NegativeQueue) else negatives
    single = q.ndim == 1
    if single:
        q = q[None]
        k_pos = k_pos[None]
    if q.shape != k_pos.shape:
        raise ContractViolation(f"query/key shapes differ: {tuple(q.shape)} vs {tuple(k_pos.shape)}")
    pos_logit = (q * k_pos).sum(dim=1, keepdim=True) / temperature
    if neg.numel() == 0:
        logits = pos_logit
    else:
        neg_logits = q @ neg.t() / temperature
        logits = torch.cat([pos_logit, neg_logits], dim=1)
    target = torch.zeros(q.shape[0], dtype=torch.long, device=q.device)
    return F.cross_entropy(logits, target)


def momentum_update(query_params, key_params, m: float) -> None:
    """key <- m * key + (1 - m) * query, elementwise, in place.

    Accepts two nn.Modules or two sequences of tensors with identical
    structure.
    """
    if isinstance(query_params, nn.Module) and isinstance(key_params, nn.Module):
        q_named = dict(query_params.named_parameters())
        k_named = dict(key_params.named_parameters())
        if q_named.keys() != k_named.keys():
            raise ContractViolation("parameter collections are not structurally identical")
        pairs = [(q_named[name], k_named[name]) for name in q_named]
    else:
        q_list = list(query_params)
        k_list = list(key_params)
        if len(q_list) != len(k_list):
            raise ContractViolation("parameter collections are not structurally identical")
        pairs = list(zip(q_list, k_list))
    with torch.no_grad():
        for q, k in pairs:
            if q.shape != k.shape:
                raise ContractViolation(f"parameter shapes differ: {tuple(q.shape)} vs {tuple(k.shape)}")
            k.mul_(m).add_(q.detach(), alpha=1.0 - m)


class ProjectionHead(nn.Module):
    """Two-layer MLP mapping pooled backbone features to unit-norm embeddings."""

    def __init__(self, in_channels: int, embedding_dim: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_channels, in_channels)
        self.fc2 = nn.Linear(in_channels, embedding_dim)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        z = self.fc2(F.relu(self.fc1(pooled)))
        return normalize_embedding(z)


class ContrastiveEncoder(nn.Module):
    """Backbone (shared with the detector) plus projection, deepest tap pooled."""

    def __init__(self, backbone: nn.Module, projection: ProjectionHead):
        super().__init__()
        self.backbone = backbone
        self.projection = projection

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        taps = self.backbone(x)
        pooled = taps[-1].mean(dim=(2, 3))
        return self.projection(pooled)


class MoCoPair:
    """Query encoder plus its momentum copy.

    The key encoder starts as an exact copy of the query encoder and is
    never touched by the optimizer; gradients are disabled on it.
    """

    def __init__(self, query: ContrastiveEncoder, momentum: float):
        self.query = query
        self.momentum = momentum
        self.key = copy.deepcopy(query)
        for p in self.key.parameters():
            p.requires_grad_(False)

    def update_key(self) -> None:
        momentum_update(self.query, self.key, self.momentum)


# ---------------------------------------------------------------------------
# View generation


def _resize(px: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(px.transpose(2, 0, 1)))[None].float()
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0)


def view_augment(pixels: np.ndarray, rng: np.random.Generator, cfg: ContrastiveConfig) -> np.ndarray:
    """Standard view stack: random resized crop, flip, mild color noise."""
    h, w = pixels.shape[:2]
    scale = float(rng.uniform(cfg.crop_min_scale, 1.0))
    ch = max(1, int(round(h * scale)))
    cw = max(1, int(round(w * scale)))
    y = int(rng.integers(h - ch + 1))
    x = int(rng.integers(w - cw + 1))
    crop = pixels[y:y + ch, x:x + cw]
    out = _resize(crop, cfg.view_size)
    if rng.uniform() < cfg.flip_prob:
        out = out[:, ::-1]
    if cfg.color_noise > 0:
        shift = rng.uniform(-cfg.color_noise, cfg.color_noise, size=(1, 1, 3))
        out = out + shift
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def d_star_augment(
    image: Image,
    degrade_pipeline,
    rng: np.random.Generator,
    probability: float = 0.5,
) -> Image:
    """Coin-flip augmentation: keep the bright image or degrade it."""
    if image.domain is not Domain.H:
        raise ContractViolation(f"d_star_augment expects a bright-domain image, got {image.domain.value}")
    if rng.uniform() < probability:
        return degrade_pipeline(image, rng)
    return image


# ---------------------------------------------------------------------------
# Loss assembly


def _make_view_batch(views: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack([v.transpose(2, 0, 1) for v in views])).float()


def _instance_loss(
    images: list[Image],
    pair: MoCoPair,
    queue: NegativeQueue,
    cfg: ContrastiveConfig,
    rng: np.random.Generator,
    make_source,
) -> torch.Tensor:
    """Shared InfoNCE step: three views per image, queue fed from the third.

    ``make_source(image, rng)`` produces the raster for one view; it is
    called three times per image (query, key, queue-bound), so any
    stochastic domain choice is drawn independently per view.
    """
    if not images:
        raise ContractViolation("contrastive loss needs a nonempty batch")
    q_views, k_views, qu_views = [], [], []
    for img in images:
        q_views.append(view_augment(make_source(img, rng), rng, cfg))
        k_views.append(view_augment(make_source(img, rng), rng, cfg))
        qu_views.append(view_augment(make_source(img, rng), rng, cfg))
    q = pair.query(_make_view_batch(q_views))
    with torch.no_grad():
        k = pair.key(_make_view_batch(k_views))
        qu = pair.key(_make_view_batch(qu_views))
    loss = info_nce(q, k, queue, cfg.temperature)
    queue.enqueue(qu)
    return loss


def loss_h_dh(
    images: list[Image],
    pair: MoCoPair,
    queue: NegativeQueue,
    cfg: ContrastiveConfig,
    rng: np.random.Generator,
    degrade_pipeline,
    view_probabilities: tuple[float, float, float] | None = None,
) -> torch.Tensor:
    """Cross-domain contrastive term on bright images.

    Each view independently keeps the image bright or degrades it (the
    coin probability can be overridden per view slot for analysis).
    """
    probs = view_probabilities or (cfg.d_star_probability,) * 3
    slot = {"i": 0}

    def make_source(img: Image, r: np.random.Generator) -> np.ndarray:
        p = probs[slot["i"] % 3]
        slot["i"] += 1
        return d_star_augment(img, degrade_pipeline, r, probability=p).pixels

    return _instance_loss(images, pair, queue, cfg, rng, make_source)


def loss_el_up(
    images: list[Image],
    pair: MoCoPair,
    queue: NegativeQueue,
    cfg: ContrastiveConfig,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Single-domain instance discrimination on brightened-dark images."""

    def make_source(img: Image, r: np.random.Generator) -> np.ndarray:
        return img.pixels

    return _instance_loss(images, pair, queue, cfg, rng, make_source)
