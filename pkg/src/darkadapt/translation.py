"""Paired image-to-image translation for learned noise synthesis.

A small conditional generator learns the residual between a blurred
color-guidance image and its noisy original; a patch discriminator keeps
the residual statistics honest (plain reconstruction would collapse to
the identity, since the residual is zero-mean). Least-squares adversarial
objectives are used for stability at small scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from darkadapt.data import fork_rng
from darkadapt.exceptions import ContractViolation, TrainingError


@dataclass
class TranslationConfig:
    base_width: int = 16
    noise_channels: int = 2
    residual_scale: float = 0.25


@dataclass
class TranslationTrainConfig:
    steps: int = 1200
    batch_size: int = 8
    crop: int = 32
    lr: float = 2e-4
    l1_weight: float = 1.0
    seed: int = 0


class NoiseGenerator(nn.Module):
    """Residual generator conditioned on the blurred image plus a noise field."""

    def __init__(self, config: TranslationConfig | None = None):
        super().__init__()
        self.config = config or TranslationConfig()
        w = self.config.base_width
        nz = self.config.noise_channels
        self.body = nn.Sequential(
            nn.Conv2d(3 + nz, w, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, w, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, w, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 3, 3, padding=1),
        )

    def forward(self, blurred: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        residual = torch.tanh(self.body(torch.cat([blurred, z], dim=1)))
        return blurred + self.config.residual_scale * residual


class PatchDiscriminator(nn.Module):
    """Patch-level real/fake head over (condition, candidate) pairs.

    The decisive statistic for noise is the local residual energy, a
    second-order quantity that plain convs are slow to discover, so the
    scaled squared residual is fed in as extra channels.
    """

    RESIDUAL_GAIN = 100.0

    def __init__(self, base_width: int = 16):
        super().__init__()
        w = base_width
        self.body = nn.Sequential(
            nn.Conv2d(9, w, 3, stride=1, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 1, 3, padding=1),
        )

    def forward(self, condition: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        residual_energy = self.RESIDUAL_GAIN * (candidate - condition) ** 2
        return self.body(torch.cat([condition, candidate, residual_energy], dim=1))


def generate_noisy(generator: NoiseGenerator, blurred: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Run the generator on one (H, W, 3) raster with a fresh noise field."""
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(blurred.transpose(2, 0, 1)))[None].float()
        z = torch.from_numpy(
            rng.standard_normal((1, generator.config.noise_channels, x.shape[2], x.shape[3])).astype(np.float32)
        )
        out = generator(x, z)
    return out[0].numpy().transpose(1, 2, 0)


def train_paired_translator(
    sources: np.ndarray,
    targets: np.ndarray,
    train_cfg: TranslationTrainConfig | None = None,
    net_cfg: TranslationConfig | None = None,
) -> tuple[NoiseGenerator, list[dict]]:
    """Adversarial + L1 training on aligned (blurred, noisy) pairs.

    sources/targets: (N, H, W, 3) float arrays in [0, 1], spatially aligned.
    """
    if sources.shape != targets.shape:
        raise ContractViolation(f"pair shapes differ: {sources.shape} vs {targets.shape}")
    if sources.ndim != 4 or sources.shape[0] < 1:
        raise ContractViolation("need at least one aligned training pair")
    tc = train_cfg or TranslationTrainConfig()
    rng = fork_rng(tc.seed, "noise-train")
    torch.manual_seed(int(fork_rng(tc.seed, "noise-init").integers(2 ** 31)))

    generator = NoiseGenerator(net_cfg)
    discriminator = PatchDiscriminator(generator.config.base_width)
    opt_g = torch.optim.Adam(generator.parameters(), lr=tc.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=tc.lr, betas=(0.5, 0.999))
    history: list[dict] = []

    n, h, w, _ = sources.shape
    crop = min(tc.crop, h, w)
    nz = generator.config.noise_channels

    for step in range(tc.steps):
        idx = rng.integers(n, size=tc.batch_size)
        ys = rng.integers(h - crop + 1, size=tc.batch_size)
        xs = rng.integers(w - crop + 1, size=tc.batch_size)
        src = np.stack([sources[i, y:y + crop, x:x + crop] for i, y, x in zip(idx, ys, xs)])
        tgt = np.stack([targets[i, y:y + crop, x:x + crop] for i, y, x in zip(idx, ys, xs)])
        src_t = torch.from_numpy(src.transpose(0, 3, 1, 2)).float()
        tgt_t = torch.from_numpy(tgt.transpose(0, 3, 1, 2)).float()
        z = torch.from_numpy(rng.standard_normal((tc.batch_size, nz, crop, crop)).astype(np.float32))

        fake = generator(src_t, z)

        # discriminator step (least squares targets 1=real, 0=fake)
        opt_d.zero_grad()
        d_real = discriminator(src_t, tgt_t)
        d_fake = discriminator(src_t, fake.detach())
        loss_d = 0.5 * (F.mse_loss(d_real, torch.ones_like(d_real)) + F.mse_loss(d_fake, torch.zeros_like(d_fake)))
        loss_d.backward()
        opt_d.step()

        # generator step
        opt_g.zero_grad()
        d_fake2 = discriminator(src_t, fake)
        loss_adv = F.mse_loss(d_fake2, torch.ones_like(d_fake2))
        loss_l1 = F.l1_loss(fake, tgt_t)
        loss_g = loss_adv + tc.l1_weight * loss_l1
        loss_g.backward()
        opt_g.step()

        if not (torch.isfinite(loss_d) and torch.isfinite(loss_g)):
            raise TrainingError(step, "translation loss is not finite")
        history.append(
            {
                "step": step,
                "d": float(loss_d.detach()),
                "g": float(loss_g.detach()),
                "adv": float(loss_adv.detach()),
                "l1": float(loss_l1.detach()),
            }
        )
    return generator, history
