"""Bright-to-degraded pixel pipeline: guided blur, noise synthesis, jitter.

The pipeline turns clean bright images into degraded ones whose noise and
color statistics resemble brightened dark footage: a strong bilateral
blur produces a color-guidance image, a noise model puts sensor-like
texture back on top of it, and calibrated color jittering shifts the
color distribution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch.nn as nn

from darkadapt import checkpoint, translation
from darkadapt.data import Domain, Image, assert_valid_image
from darkadapt.exceptions import ContractViolation, DomainMisuseError
from darkadapt.translation import (
    NoiseGenerator,
    TranslationConfig,
    TranslationTrainConfig,
    generate_noisy,
    train_paired_translator,
)

# Jitter ranges calibrated against the color statistics of brightened
# dark footage; open intervals, validated at use.
BRIGHTNESS_RANGE = (0.4, 1.2)
CONTRAST_RANGE = (0.6, 1.4)
SATURATION_RANGE = (0.6, 1.4)
HUE_RANGE = (0.8, 1.2)

# Grayscale weights used by the contrast/saturation stages.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class BilateralParams:
    """Neighborhood diameter and kernel widths of the bilateral filter.

    ``sigma_range`` is interpreted on the 8-bit value scale (a difference
    of 75 means 75 gray levels), since that is the scale on which the
    usual magnitudes are quoted. ``sigma_space`` is in pixels.
    """

    d: int = 25
    sigma_space: float = 75.0
    sigma_range: float = 75.0

    def __post_init__(self):
        if self.d < 1 or self.d % 2 == 0:
            raise ContractViolation(f"diameter must be odd and >= 1, got {self.d}")
        if self.sigma_space <= 0 or self.sigma_range <= 0:
            raise ContractViolation("bilateral sigmas must be positive")


def _reflect_indices(n: int, radius: int) -> np.ndarray:
    """Reflection (no edge repeat) index map for arbitrary padding."""
    idx = np.arange(-radius, n + radius)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    m = np.mod(idx, period)
    return np.where(m >= n, period - m, m)


def bilateral_filter(pixels: np.ndarray, params: BilateralParams) -> np.ndarray:
    """Joint spatial/range Gaussian filtering of an (H, W, 3) raster.

    The range weight uses the Euclidean color distance on the 0-255
    scale, shared by all three channels; weights are normalized per
    pixel, so the output is a convex combination of input values.
    """
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ContractViolation(f"expected (H, W, 3) raster, got {pixels.shape}")
    h, w = pixels.shape[:2]
    r = params.d // 2
    src = pixels.astype(np.float64)
    ry = _reflect_indices(h, r)
    rx = _reflect_indices(w, r)
    padded = src[np.ix_(ry, rx)]

    inv_2ss = 1.0 / (2.0 * params.sigma_space ** 2)
    inv_2sr = 1.0 / (2.0 * params.sigma_range ** 2)
    num = np.zeros_like(src)
    den = np.zeros((h, w), dtype=np.float64)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            window = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            diff = (window - src) * 255.0
            weight = np.exp(-(dy * dy + dx * dx) * inv_2ss) * np.exp(-np.sum(diff * diff, axis=2) * inv_2sr)
            num += weight[:, :, None] * window
            den += weight
    return num / den[:, :, None]


def bilateral_blur(image: Image, params: BilateralParams) -> Image:
    """Filter an image and retag it as the color-guidance blur."""
    assert_valid_image(image)
    out = bilateral_filter(image.pixels, params)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return Image(pixels=out, domain=Domain.BLUR, id=image.id)


# ---------------------------------------------------------------------------
# Noise synthesis


@dataclass
class NoiseModel:
    """Either a learned translation network or a parametric fallback.

    The parametric form adds a flat Gaussian term plus a signal-dependent
    term, so every downstream consumer can run without adversarial
    training.
    """

    kind: str = "parametric"
    gaussian_sigma: float = 0.0
    poisson_scale: float = 0.0
    generator: nn.Module | None = None

    def __post_init__(self):
        if self.kind not in ("parametric", "learned"):
            raise ContractViolation(f"unknown noise model kind {self.kind!r}")
        if self.kind == "learned" and self.generator is None:
            raise ContractViolation("learned noise model requires generator weights")
        if self.kind == "parametric" and self.generator is not None:
            raise ContractViolation("parametric noise model must not carry a generator")
        if self.gaussian_sigma < 0 or self.poisson_scale < 0:
            raise ContractViolation("noise scales must be nonnegative")

    @classmethod
    def parametric(cls, gaussian_sigma: float = 0.0, poisson_scale: float = 0.0) -> "NoiseModel":
        return cls(kind="parametric", gaussian_sigma=gaussian_sigma, poisson_scale=poisson_scale)

    @classmethod
    def learned(cls, generator: nn.Module) -> "NoiseModel":
        return cls(kind="learned", generator=generator)


def synth_noise(model: NoiseModel, image: Image, rng: np.random.Generator) -> Image:
    """Add noise to a blurred image; output is clipped to [0, 1]."""
    if image.domain is not Domain.BLUR:
        raise DomainMisuseError(f"noise synthesis expects a blurred image, got {image.domain.value}")
    px = image.pixels.astype(np.float64)
    if model.kind == "parametric":
        out = px
        if model.gaussian_sigma > 0:
            out = out + model.gaussian_sigma * rng.standard_normal(px.shape)
        if model.poisson_scale > 0:
            out = out + np.sqrt(np.maximum(px, 0.0) * model.poisson_scale) * rng.standard_normal(px.shape)
    else:
        out = generate_noisy(model.generator, image.pixels.astype(np.float32), rng).astype(np.float64)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return Image(pixels=out, domain=image.domain, id=image.id)


def train_noise_model(
    pairs: list[tuple[Image, Image]],
    train_cfg: TranslationTrainConfig | None = None,
    net_cfg: TranslationConfig | None = None,
) -> tuple[NoiseModel, list[dict]]:
    """Fit the learned noise model on aligned (blurred, noisy) image pairs."""
    if not pairs:
        raise ContractViolation("train_noise_model needs at least one pair")
    for src, tgt in pairs:
        if src.pixels.shape != tgt.pixels.shape:
            raise ContractViolation(
                f"pair {src.id!r}/{tgt.id!r} is not spatially aligned: "
                f"{src.pixels.shape} vs {tgt.pixels.shape}"
            )
    sources = np.stack([p[0].pixels for p in pairs]).astype(np.float32)
    targets = np.stack([p[1].pixels for p in pairs]).astype(np.float32)
    generator, history = train_paired_translator(sources, targets, train_cfg, net_cfg)
    return NoiseModel.learned(generator), history


def save_noise_model(model: NoiseModel, path) -> None:
    if model.kind != "learned":
        raise ContractViolation("only learned noise models are checkpointed")
    checkpoint.save_checkpoint(
        path,
        kind="noise-model",
        config=asdict(model.generator.config),
        state_dicts={"generator": model.generator.state_dict()},
    )


def load_noise_model(path) -> NoiseModel:
    payload = checkpoint.load_checkpoint(path, expected_kind="noise-model")
    generator = NoiseGenerator(translation.TranslationConfig(**payload["config"]))
    generator.load_state_dict(payload["state_dicts"]["generator"])
    return NoiseModel.learned(generator)


# ---------------------------------------------------------------------------
# Color jittering


@dataclass(frozen=True)
class JitterFactors:
    brightness: float
    contrast: float
    saturation: float
    hue: float

    def validate(self) -> None:
        for name, value, (lo, hi) in (
            ("brightness", self.brightness, BRIGHTNESS_RANGE),
            ("contrast", self.contrast, CONTRAST_RANGE),
            ("saturation", self.saturation, SATURATION_RANGE),
            ("hue", self.hue, HUE_RANGE),
        ):
            if not (lo < value < hi):
                raise ContractViolation(f"{name} factor {value} outside ({lo}, {hi})")

    @classmethod
    def identity(cls) -> "JitterFactors":
        return cls(1.0, 1.0, 1.0, 1.0)


def sample_jitter(rng: np.random.Generator) -> JitterFactors:
    """Draw one set of factors, uniform over the calibrated ranges."""
    return JitterFactors(
        brightness=float(rng.uniform(*BRIGHTNESS_RANGE)),
        contrast=float(rng.uniform(*CONTRAST_RANGE)),
        saturation=float(rng.uniform(*SATURATION_RANGE)),
        hue=float(rng.uniform(*HUE_RANGE)),
    )


def rgb_to_hsv(px: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV on an (H, W, 3) array, all channels in [0, 1]."""
    r, g, b = px[..., 0], px[..., 1], px[..., 2]
    maxc = px.max(axis=-1)
    minc = px.min(axis=-1)
    v = maxc
    c = maxc - minc
    s = np.where(maxc > 0, c / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.zeros_like(maxc)
    r_max = (maxc == r) & (c > 0)
    g_max = (maxc == g) & (c > 0) & ~r_max
    b_max = (c > 0) & ~r_max & ~g_max
    h = np.where(r_max, ((g - b) / safe_c) % 6.0, h)
    h = np.where(g_max, (b - r) / safe_c + 2.0, h)
    h = np.where(b_max, (r - g) / safe_c + 4.0, h)
    return np.stack([h / 6.0, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`."""
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _apply_brightness(px: np.ndarray, factor: float) -> np.ndarray:
    return px * factor


def _apply_contrast(px: np.ndarray, factor: float) -> np.ndarray:
    mean_lum = float((px @ _LUMA).mean())
    return mean_lum + factor * (px - mean_lum)


def _apply_saturation(px: np.ndarray, factor: float) -> np.ndarray:
    gray = (px @ _LUMA)[..., None]
    return gray + factor * (px - gray)


def _apply_hue(px: np.ndarray, factor: float) -> np.ndarray:
    hsv = rgb_to_hsv(px)
    hsv[..., 0] = (hsv[..., 0] * factor) % 1.0
    return hsv_to_rgb(hsv)


def color_jitter(image: Image, factors: JitterFactors) -> Image:
    """Apply brightness, contrast, saturation, hue in that fixed order.

    Each stage clamps its output to [0, 1]; the hue stage works in an
    HSV representation with multiplicative wraparound on the hue angle.
    """
    factors.validate()
    assert_valid_image(image)
    px = image.pixels.astype(np.float64)
    # a factor of exactly 1.0 is a structural no-op for its stage
    if factors.brightness != 1.0:
        px = np.clip(_apply_brightness(px, factors.brightness), 0.0, 1.0)
    if factors.contrast != 1.0:
        px = np.clip(_apply_contrast(px, factors.contrast), 0.0, 1.0)
    if factors.saturation != 1.0:
        px = np.clip(_apply_saturation(px, factors.saturation), 0.0, 1.0)
    if factors.hue != 1.0:
        px = np.clip(_apply_hue(px, factors.hue), 0.0, 1.0)
    return Image(pixels=px.astype(np.float32), domain=image.domain, id=image.id)


# ---------------------------------------------------------------------------
# Full pipeline


@dataclass
class DegradeConfig:
    bilateral: BilateralParams = field(default_factory=BilateralParams)
    blur_enabled: bool = True
    noise_kind: str = "parametric"
    gaussian_sigma: float = 0.02
    poisson_scale: float = 0.0
    noise_ckpt: str | None = None
    fixed_jitter: tuple[float, float, float, float] | None = None

    def build_noise_model(self) -> NoiseModel:
        if self.noise_kind == "parametric":
            return NoiseModel.parametric(self.gaussian_sigma, self.poisson_scale)
        if self.noise_kind == "learned":
            if self.noise_ckpt is None:
                raise ContractViolation("learned noise model requires noise_ckpt")
            return load_noise_model(self.noise_ckpt)
        raise ContractViolation(f"unknown noise kind {self.noise_kind!r}")


def degrade(
    image: Image,
    noise_model: NoiseModel,
    rng: np.random.Generator,
    config: DegradeConfig | None = None,
    blur_cache: dict[str, np.ndarray] | None = None,
    jitter_log: list[JitterFactors] | None = None,
) -> Image:
    """Full bright-to-degraded pipeline: blur, noise, one jitter draw.

    The factors drawn for each image are appended to ``jitter_log`` when
    one is supplied (used for per-image sidecar audit records).
    """
    cfg = config or DegradeConfig()
    if image.domain is not Domain.H:
        raise DomainMisuseError(f"degrade expects a bright-domain image, got {image.domain.value}")
    if cfg.blur_enabled:
        if blur_cache is not None and image.id and image.id in blur_cache:
            stage = Image(pixels=blur_cache[image.id], domain=Domain.BLUR, id=image.id)
        else:
            stage = bilateral_blur(image, cfg.bilateral)
            if blur_cache is not None and image.id:
                blur_cache[image.id] = stage.pixels
    else:
        stage = Image(pixels=image.pixels, domain=Domain.BLUR, id=image.id)
    stage = synth_noise(noise_model, stage, rng)
    factors = (
        JitterFactors(*cfg.fixed_jitter) if cfg.fixed_jitter is not None else sample_jitter(rng)
    )
    if jitter_log is not None:
        jitter_log.append(factors)
    stage = color_jitter(stage, factors)
    return Image(pixels=stage.pixels, domain=Domain.DH, id=image.id)


class DegradePipeline:
    """Callable wrapper bundling config, noise model, and a blur cache.

    The bilateral stage is deterministic per image, so its result is
    memoized by image id; noise and jitter stay freshly sampled per call.
    """

    def __init__(self, config: DegradeConfig | None = None, noise_model: NoiseModel | None = None):
        self.config = config or DegradeConfig()
        self.noise_model = noise_model or self.config.build_noise_model()
        self.blur_cache: dict[str, np.ndarray] = {}

    def __call__(self, image: Image, rng: np.random.Generator) -> Image:
        return degrade(image, self.noise_model, rng, self.config, self.blur_cache)
