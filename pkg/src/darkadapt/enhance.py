"""Brightening via iterative pixel-wise quadratic curve mapping.

A single step maps ``x -> x + A * x * (1 - x)`` with a per-pixel,
per-channel adjustment map ``A`` in [-1, 1]. The map keeps 0 and 1 fixed
and stays monotone in ``x``, so iterating it can never leave [0, 1] and
never inverts the ordering of pixel values. The adjustment maps are
predicted by a small CNN trained with reference-free objectives.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from darkadapt import checkpoint
from darkadapt.data import Domain, Image, assert_valid_image, fork_rng
from darkadapt.exceptions import ContractViolation, DomainMisuseError, StateError, TrainingError

WEAK_ITERATIONS = 8
WEAK_WIDTH = 32


@dataclass
class CurveEstimatorConfig:
    """Architecture knobs for the curve estimation network.

    The strong variant doubles both the iteration count and the channel
    width of the weak one.
    """

    iterations: int = WEAK_ITERATIONS
    width: int = WEAK_WIDTH

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractViolation(f"iterations must be >= 1, got {self.iterations}")
        if self.width < 1:
            raise ContractViolation(f"width must be >= 1, got {self.width}")

    @classmethod
    def weak(cls) -> "CurveEstimatorConfig":
        return cls(iterations=WEAK_ITERATIONS, width=WEAK_WIDTH)

    @classmethod
    def strong(cls) -> "CurveEstimatorConfig":
        return cls(iterations=2 * WEAK_ITERATIONS, width=2 * WEAK_WIDTH)

    @classmethod
    def variant(cls, name: str) -> "CurveEstimatorConfig":
        if name == "weak":
            return cls.weak()
        if name == "strong":
            return cls.strong()
        raise ContractViolation(f"unknown enhancer variant {name!r}")


def curve_step(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """One quadratic curve application: x + a*x*(1-x), elementwise."""
    x = np.asarray(x)
    a = np.asarray(a)
    if x.shape != a.shape:
        raise ContractViolation(f"shape mismatch: x {x.shape} vs adjustment map {a.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ContractViolation("input raster must lie in [0, 1]")
    if a.size and (a.min() < -1.0 or a.max() > 1.0):
        raise ContractViolation("adjustment map must lie in [-1, 1]")
    return x + a * x * (1.0 - x)


def curve_enhance(x: np.ndarray, maps: list[np.ndarray] | np.ndarray) -> np.ndarray:
    """Iterated curve application, in map index order."""
    if len(maps) == 0:
        raise ContractViolation("curve_enhance needs at least one adjustment map")
    out = np.asarray(x, dtype=np.float64)
    for a in maps:
        out = curve_step(out, a)
    return out


def apply_curves(x: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
    """Torch twin of :func:`curve_enhance` for training.

    x: (B, 3, H, W) in [0, 1]; maps: (B, 3*n, H, W) in [-1, 1].
    """
    if maps.shape[1] % 3 != 0:
        raise ContractViolation(f"map tensor channels must be a multiple of 3, got {maps.shape[1]}")
    n = maps.shape[1] // 3
    out = x
    for i in range(n):
        a = maps[:, 3 * i:3 * i + 3]
        out = out + a * out * (1.0 - out)
    return out


class CurveEstimator(nn.Module):
    """7-layer CNN with symmetric skip connections predicting curve maps.

    The tanh output squashes every map into (-1, 1), so the range
    invariant of the curve mapping holds structurally.
    """

    def __init__(self, config: CurveEstimatorConfig | None = None):
        super().__init__()
        self.config = config or CurveEstimatorConfig()
        w = self.config.width
        self.conv1 = nn.Conv2d(3, w, 3, padding=1)
        self.conv2 = nn.Conv2d(w, w, 3, padding=1)
        self.conv3 = nn.Conv2d(w, w, 3, padding=1)
        self.conv4 = nn.Conv2d(w, w, 3, padding=1)
        self.conv5 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.conv6 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.conv7 = nn.Conv2d(2 * w, 3 * self.config.iterations, 3, padding=1)
        self.trained = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c1 = F.relu(self.conv1(x))
        c2 = F.relu(self.conv2(c1))
        c3 = F.relu(self.conv3(c2))
        c4 = F.relu(self.conv4(c3))
        c5 = F.relu(self.conv5(torch.cat([c4, c3], dim=1)))
        c6 = F.relu(self.conv6(torch.cat([c5, c2], dim=1)))
        return torch.tanh(self.conv7(torch.cat([c6, c1], dim=1)))


def enhance(estimator: CurveEstimator, image: Image, allow_untrained: bool = False) -> Image:
    """Predict adjustment maps for a dark image and apply them.

    Deterministic given the estimator weights and the input.
    """
    if image.domain in (Domain.EL, Domain.DH):
        raise DomainMisuseError(f"image {image.id!r} is already tagged {image.domain.value}")
    if image.domain is not Domain.L:
        raise DomainMisuseError(f"enhance expects a dark-domain image, got {image.domain.value}")
    if not estimator.trained and not allow_untrained:
        raise StateError("curve estimator has not been trained (pass allow_untrained=True to override)")
    assert_valid_image(image)
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(image.pixels.transpose(2, 0, 1)))[None].float()
        maps = estimator(x)
        out = apply_curves(x, maps)
    pixels = out[0].numpy().transpose(1, 2, 0).astype(np.float32)
    pixels = np.clip(pixels, 0.0, 1.0)
    result = Image(pixels=pixels, domain=Domain.EL, id=image.id)
    assert_valid_image(result)
    return result


# ---------------------------------------------------------------------------
# Reference-free training objectives


def exposure_control_loss(enhanced: torch.Tensor, target: float = 0.6, patch: int = 16) -> torch.Tensor:
    """Pull local average brightness toward a well-exposed level."""
    lum = enhanced.mean(dim=1, keepdim=True)
    k = min(patch, lum.shape[2], lum.shape[3])
    pooled = F.avg_pool2d(lum, kernel_size=k, stride=k)
    return torch.mean((pooled - target) ** 2)


def color_constancy_loss(enhanced: torch.Tensor) -> torch.Tensor:
    """Penalize divergence between the mean values of the color channels."""
    mean_rgb = enhanced.mean(dim=(2, 3))
    mr, mg, mb = mean_rgb[:, 0], mean_rgb[:, 1], mean_rgb[:, 2]
    d_rg = (mr - mg) ** 2
    d_rb = (mr - mb) ** 2
    d_gb = (mg - mb) ** 2
    return torch.mean(torch.sqrt(d_rg ** 2 + d_rb ** 2 + d_gb ** 2 + 1e-12))


def illumination_smoothness_loss(maps: torch.Tensor) -> torch.Tensor:
    """Total-variation penalty on the predicted adjustment maps."""
    h_tv = torch.mean((maps[:, :, 1:, :] - maps[:, :, :-1, :]) ** 2)
    w_tv = torch.mean((maps[:, :, :, 1:] - maps[:, :, :, :-1]) ** 2)
    return h_tv + w_tv


_NEIGHBOR_KERNELS = torch.tensor(
    [
        [[0, 0, 0], [-1, 1, 0], [0, 0, 0]],
        [[0, 0, 0], [0, 1, -1], [0, 0, 0]],
        [[0, -1, 0], [0, 1, 0], [0, 0, 0]],
        [[0, 0, 0], [0, 1, 0], [0, -1, 0]],
    ],
    dtype=torch.float32,
).unsqueeze(1)


def spatial_consistency_loss(enhanced: torch.Tensor, original: torch.Tensor, pool: int = 4) -> torch.Tensor:
    """Preserve local contrast between the input and its enhanced version."""
    lum_e = enhanced.mean(dim=1, keepdim=True)
    lum_o = original.mean(dim=1, keepdim=True)
    k = min(pool, lum_e.shape[2], lum_e.shape[3])
    pe = F.avg_pool2d(lum_e, kernel_size=k, stride=k)
    po = F.avg_pool2d(lum_o, kernel_size=k, stride=k)
    kernels = _NEIGHBOR_KERNELS.to(enhanced.device)
    de = F.conv2d(pe, kernels, padding=1)
    do = F.conv2d(po, kernels, padding=1)
    return torch.mean((de - do) ** 2)


@dataclass
class EnhancerTrainConfig:
    steps: int = 200
    batch_size: int = 8
    crop: int = 64
    lr: float = 1e-4
    seed: int = 0
    exposure_target: float = 0.6
    w_spatial: float = 1.0
    w_exposure: float = 10.0
    w_color: float = 5.0
    w_smooth: float = 200.0

    def __post_init__(self):
        for name in ("w_spatial", "w_exposure", "w_color", "w_smooth"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be nonnegative")


def train_enhancer(
    config: CurveEstimatorConfig,
    images: list[Image],
    train_cfg: EnhancerTrainConfig | None = None,
) -> tuple[CurveEstimator, list[dict]]:
    """Fit a curve estimator on unlabeled dark images.

    Returns the trained estimator and a per-step loss history. Raises
    TrainingError (with the step index) if any loss turns non-finite.
    """
    if not images:
        raise ContractViolation("train_enhancer needs at least one training image")
    tc = train_cfg or EnhancerTrainConfig()
    rng = fork_rng(tc.seed, "enhancer-train")
    torch.manual_seed(int(fork_rng(tc.seed, "enhancer-init").integers(2 ** 31)))

    estimator = CurveEstimator(config)
    optimizer = torch.optim.Adam(estimator.parameters(), lr=tc.lr)
    history: list[dict] = []

    stack = [img.pixels for img in images]
    for step in range(tc.steps):
        batch = _sample_crops(stack, tc.batch_size, tc.crop, rng)
        x = torch.from_numpy(batch).float()
        maps = estimator(x)
        enhanced = apply_curves(x, maps)
        l_spa = spatial_consistency_loss(enhanced, x)
        l_exp = exposure_control_loss(enhanced, target=tc.exposure_target)
        l_col = color_constancy_loss(enhanced)
        l_smo = illumination_smoothness_loss(maps)
        total = tc.w_spatial * l_spa + tc.w_exposure * l_exp + tc.w_color * l_col + tc.w_smooth * l_smo
        if not torch.isfinite(total):
            raise TrainingError(step, "enhancer loss is not finite")
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        history.append(
            {
                "step": step,
                "total": float(total.detach()),
                "spatial": float(l_spa.detach()),
                "exposure": float(l_exp.detach()),
                "color": float(l_col.detach()),
                "smooth": float(l_smo.detach()),
            }
        )
    estimator.trained = tc.steps > 0
    return estimator, history


def _sample_crops(stack: list[np.ndarray], batch: int, crop: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((batch, 3, crop, crop), dtype=np.float32)
    for b in range(batch):
        px = stack[int(rng.integers(len(stack)))]
        h, w = px.shape[:2]
        if h < crop or w < crop:
            # tile small images up to the crop size instead of rejecting them
            reps = (crop + h - 1) // h, (crop + w - 1) // w
            px = np.tile(px, (reps[0], reps[1], 1))
            h, w = px.shape[:2]
        y = int(rng.integers(h - crop + 1))
        x = int(rng.integers(w - crop + 1))
        out[b] = px[y:y + crop, x:x + crop].transpose(2, 0, 1)
    return out


def save_enhancer(estimator: CurveEstimator, path) -> None:
    checkpoint.save_checkpoint(
        path,
        kind="enhancer",
        config=asdict(estimator.config),
        state_dicts={"estimator": estimator.state_dict()},
        meta={"trained": estimator.trained},
    )


def load_enhancer(path) -> CurveEstimator:
    payload = checkpoint.load_checkpoint(path, expected_kind="enhancer")
    config = CurveEstimatorConfig(**payload["config"])
    estimator = CurveEstimator(config)
    estimator.load_state_dict(payload["state_dicts"]["estimator"])
    estimator.trained = bool(payload["meta"].get("trained", True))
    return estimator
