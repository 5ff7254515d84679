"""Patch-permutation pretext task with classification heads shared across domains.

An image is cut into a 3x3 grid, the patches are reassembled according to
one of 30 fixed permutations, and per-tap linear heads classify which
permutation was applied. Feeding brightened-dark and bright batches
through the *same* heads forces their features into a common subspace.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from darkadapt.data import Image
from darkadapt.exceptions import ContractViolation

DEFAULT_GRID = 3
DEFAULT_COUNT = 30


@dataclass
class PermutationSet:
    """Ordered permutations of the patch grid; index 0 is the identity."""

    perms: np.ndarray  # (count, grid*grid) int
    grid: int = DEFAULT_GRID

    def __len__(self) -> int:
        return self.perms.shape[0]

    def to_text(self) -> str:
        return "\n".join(" ".join(str(int(v)) for v in row) for row in self.perms) + "\n"

    @classmethod
    def from_text(cls, text: str, grid: int = DEFAULT_GRID) -> "PermutationSet":
        rows = [[int(v) for v in line.split()] for line in text.splitlines() if line.strip()]
        return cls(perms=np.array(rows, dtype=np.int64), grid=grid)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def gen_permutations(grid: int = DEFAULT_GRID, count: int = DEFAULT_COUNT, rng: np.random.Generator | None = None) -> PermutationSet:
    """Identity first, then greedy max-min-Hamming selection.

    Each round adds the candidate whose minimum Hamming distance to the
    already-selected set is largest; ties are broken by a seeded draw.
    """
    n_cells = grid * grid
    all_perms = np.array(list(itertools.permutations(range(n_cells))), dtype=np.int64)
    if count > all_perms.shape[0]:
        raise ContractViolation(f"cannot pick {count} distinct permutations of {n_cells} cells")
    if count < 1:
        raise ContractViolation("count must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)

    identity = np.arange(n_cells, dtype=np.int64)
    selected = [identity]
    min_dist = (all_perms != identity).sum(axis=1)
    min_dist[0] = -1  # identity is index 0 of the lexicographic enumeration
    for _ in range(count - 1):
        best = int(min_dist.max())
        candidates = np.flatnonzero(min_dist == best)
        pick = int(candidates[rng.integers(len(candidates))])
        chosen = all_perms[pick]
        selected.append(chosen)
        min_dist = np.minimum(min_dist, (all_perms != chosen).sum(axis=1))
        min_dist[pick] = -1
    return PermutationSet(perms=np.stack(selected), grid=grid)


@dataclass
class PuzzleSample:
    image: Image
    label: int


def make_puzzle(image: Image, perm_index: int, pset: PermutationSet) -> PuzzleSample:
    """Reassemble an image's patch grid according to one permutation.

    The raster is cropped (bottom/right) to side lengths divisible by the
    grid; output tile ``i`` holds input tile ``perm[i]`` in row-major
    order.
    """
    g = pset.grid
    if not (0 <= perm_index < len(pset)):
        raise ContractViolation(f"permutation index {perm_index} out of [0, {len(pset)})")
    px = image.pixels
    h, w = px.shape[:2]
    if h < g * g or w < g * g:
        raise ContractViolation(f"image {h}x{w} too small for a {g}x{g} puzzle")
    ph, pw = h // g, w // g
    cropped = px[:ph * g, :pw * g]
    perm = pset.perms[perm_index]
    out = np.empty_like(cropped)
    for i in range(g * g):
        src = int(perm[i])
        r_out, c_out = divmod(i, g)
        r_in, c_in = divmod(src, g)
        out[r_out * ph:(r_out + 1) * ph, c_out * pw:(c_out + 1) * pw] = \
            cropped[r_in * ph:(r_in + 1) * ph, c_in * pw:(c_in + 1) * pw]
    return PuzzleSample(image=Image(pixels=out, domain=image.domain, id=image.id), label=perm_index)


class JigsawHeadSet(nn.Module):
    """One linear classifier per feature tap over pooled backbone features.

    A single head set instance serves both domains, which is what ties
    their feature spaces together.
    """

    def __init__(self, tap_channels: list[int], num_classes: int = DEFAULT_COUNT):
        super().__init__()
        self.num_classes = num_classes
        self.heads = nn.ModuleList([nn.Linear(c, num_classes) for c in tap_channels])

    def forward(self, pooled: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(pooled) != len(self.heads):
            raise ContractViolation(f"expected {len(self.heads)} tap features, got {len(pooled)}")
        return [head(feat) for head, feat in zip(self.heads, pooled)]


def _domain_term(features: list[torch.Tensor], labels: torch.Tensor, heads: JigsawHeadSet) -> torch.Tensor | None:
    if labels.numel() == 0:
        return None
    if labels.min() < 0 or labels.max() >= heads.num_classes:
        raise ContractViolation(f"puzzle label outside [0, {heads.num_classes})")
    logits = heads(features)
    per_tap = [F.cross_entropy(lg, labels) for lg in logits]
    return torch.stack(per_tap).mean()


def jigsaw_loss(
    features_el: list[torch.Tensor],
    labels_el: torch.Tensor,
    features_h: list[torch.Tensor],
    labels_h: torch.Tensor,
    heads: JigsawHeadSet,
) -> torch.Tensor:
    """Sum over domains of cross-entropy through the shared heads.

    Each domain term is averaged over taps and batch. An empty batch
    contributes nothing (empty-sum convention), so a single-domain call
    degrades to plain cross-entropy for the other domain.
    """
    terms = []
    for feats, labels in ((features_el, labels_el), (features_h, labels_h)):
        term = _domain_term(feats, labels, heads)
        if term is not None:
            terms.append(term)
    if not terms:
        return torch.zeros((), dtype=torch.float32)
    return torch.stack(terms).sum()
