"""Self-contained synthetic bright/dark detection benchmark.

Scenes are procedurally generated: a smooth textured background with a
few rectangular distractors and one to three elliptical "face" targets
(warm fill, dark eye dots). The dark half of the benchmark is produced
by gamma-darkening plus the degradation pipeline, which approximates the
real dark domain's illumination, noise, and color statistics at desk
scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from darkadapt.data import (
    Domain,
    GroundTruthBox,
    Image,
    save_image,
    serialize_annotations,
    write_manifest,
)
from darkadapt.degrade import DegradeConfig, DegradePipeline
from darkadapt.detector import iou_matrix
from darkadapt.exceptions import ContractViolation

LabeledImage = tuple[Image, list[GroundTruthBox]]


@dataclass
class SceneConfig:
    size: int = 64
    min_faces: int = 1
    max_faces: int = 3
    face_min: int = 12
    face_max: int = 28
    distractors: int = 2


@dataclass
class DarkeningConfig:
    gamma: float = 3.0
    degrade: DegradeConfig = field(
        default_factory=lambda: DegradeConfig(gaussian_sigma=0.03)
    )


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.35, 0.75, size=(4, 4, 3))
    # bilinear upsample of the coarse grid
    idx = np.linspace(0, 3, size)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, 3)
    frac = idx - i0
    rows = coarse[i0] * (1 - frac)[:, None, None] + coarse[i1] * frac[:, None, None]
    cols = rows[:, i0] * (1 - frac)[None, :, None] + rows[:, i1] * frac[None, :, None]
    cols += rng.normal(0.0, 0.015, size=cols.shape)
    return np.clip(cols, 0.0, 1.0)


def _draw_face(px: np.ndarray, cy: float, cx: float, ry: float, rx: float, rng: np.random.Generator) -> None:
    size = px.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    base_r = rng.uniform(0.78, 0.95)
    color = np.array([base_r, base_r * rng.uniform(0.68, 0.78), base_r * rng.uniform(0.5, 0.6)])
    px[mask] = color
    eye_r = max(1.0, 0.18 * min(ry, rx))
    for sign in (-1, 1):
        ey, ex = cy - 0.3 * ry, cx + sign * 0.4 * rx
        eye = ((yy - ey) ** 2 + (xx - ex) ** 2) <= eye_r ** 2
        px[eye & mask] = rng.uniform(0.05, 0.18)
    mouth = (np.abs(yy - (cy + 0.45 * ry)) <= max(1.0, 0.1 * ry)) & (
        np.abs(xx - cx) <= 0.45 * rx
    )
    px[mouth & mask] = rng.uniform(0.15, 0.3)


def draw_scene(rng: np.random.Generator, cfg: SceneConfig | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """One bright scene and the boxes of its face targets."""
    cfg = cfg or SceneConfig()
    s = cfg.size
    px = _smooth_background(rng, s)
    for _ in range(cfg.distractors):
        w = int(rng.integers(6, max(7, s // 3)))
        h = int(rng.integers(6, max(7, s // 3)))
        y = int(rng.integers(0, s - h))
        x = int(rng.integers(0, s - w))
        px[y:y + h, x:x + w] = rng.uniform(0.25, 0.8, size=3)

    boxes: list[np.ndarray] = []
    n_faces = int(rng.integers(cfg.min_faces, cfg.max_faces + 1))
    attempts = 0
    while len(boxes) < n_faces and attempts < 40:
        attempts += 1
        side = float(rng.uniform(cfg.face_min, cfg.face_max))
        ry = side / 2.0
        rx = side / 2.0 * float(rng.uniform(0.85, 1.1))
        cy = float(rng.uniform(ry + 1, s - ry - 1))
        cx = float(rng.uniform(rx + 1, s - rx - 1))
        box = np.array([cx - rx, cy - ry, cx + rx, cy + ry])
        if boxes and iou_matrix(box[None], np.stack(boxes)).max() > 0.05:
            continue
        _draw_face(px, cy, cx, ry, rx, rng)
        boxes.append(box)
    return px.astype(np.float32), boxes


def generate_scenes(count: int, rng: np.random.Generator, cfg: SceneConfig | None = None) -> list[LabeledImage]:
    scenes: list[LabeledImage] = []
    for i in range(count):
        px, boxes = draw_scene(rng, cfg)
        image_id = f"scene_{i:05d}"
        gt = [GroundTruthBox(*(float(v) for v in b), image_id=image_id) for b in boxes]
        scenes.append((Image(pixels=px, domain=Domain.H, id=image_id), gt))
    return scenes


@dataclass
class Benchmark:
    bright: list[LabeledImage]
    dark_train: list[Image]
    dark_eval: list[LabeledImage]


def darken_image(image: Image, dark_cfg: DarkeningConfig, pipeline: DegradePipeline, rng: np.random.Generator) -> Image:
    """Gamma darkening followed by the degradation pipeline, retagged dark."""
    px = image.pixels if dark_cfg.gamma == 1.0 else np.power(image.pixels, dark_cfg.gamma).astype(np.float32)
    staged = pipeline(Image(pixels=px, domain=Domain.H, id=image.id), rng)
    return Image(pixels=staged.pixels, domain=Domain.L, id=image.id)


def make_synthetic_benchmark(
    sources: list[LabeledImage],
    dark_cfg: DarkeningConfig,
    rng: np.random.Generator,
    n_bright: int | None = None,
    n_dark_train: int | None = None,
    n_dark_eval: int | None = None,
) -> Benchmark:
    """Partition labeled sources into bright/dark sets with disjoint ids.

    Dark-train labels are withheld (the images alone are returned); the
    dark-eval part keeps its boxes for measurement only.
    """
    if len(sources) < 100:
        raise ContractViolation(f"need at least 100 labeled sources, got {len(sources)}")
    n_total = len(sources)
    if n_bright is None:
        n_bright = int(0.45 * n_total)
    if n_dark_train is None:
        n_dark_train = int(0.35 * n_total)
    if n_dark_eval is None:
        n_dark_eval = n_total - n_bright - n_dark_train
    if n_bright + n_dark_train + n_dark_eval > n_total:
        raise ContractViolation("benchmark part sizes exceed the source count")

    pipeline = DegradePipeline(dark_cfg.degrade)
    bright = sources[:n_bright]
    dark_train_src = sources[n_bright:n_bright + n_dark_train]
    dark_eval_src = sources[n_bright + n_dark_train:n_bright + n_dark_train + n_dark_eval]

    dark_train = [darken_image(img, dark_cfg, pipeline, rng) for img, _ in dark_train_src]
    dark_eval = [
        (darken_image(img, dark_cfg, pipeline, rng), boxes) for img, boxes in dark_eval_src
    ]
    return Benchmark(bright=bright, dark_train=dark_train, dark_eval=dark_eval)


def write_benchmark(bench: Benchmark, out_dir: str | Path) -> None:
    """Materialize images, annotation files, and manifests on disk.

    Layout: ``images/`` holds PNGs; ``bright_train.txt`` and
    ``dark_eval.txt`` are annotation files; ``*_manifest.txt`` list one
    relative image path per line. Dark-train boxes are never written.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    def _write_set(labeled: list[LabeledImage] | None, images: list[Image] | None, stem: str):
        rels = []
        entries = []
        items = labeled if labeled is not None else [(img, None) for img in images]
        for img, boxes in items:
            rel = f"images/{img.id}.png"
            save_image(img, out_dir / rel)
            rels.append(rel)
            if boxes is not None:
                entries.append((rel, boxes))
        write_manifest(rels, out_dir / f"{stem}_manifest.txt")
        if entries:
            (out_dir / f"{stem}.txt").write_text(serialize_annotations(entries), encoding="utf-8")

    _write_set(bench.bright, None, "bright_train")
    _write_set(None, bench.dark_train, "dark_train")
    _write_set(bench.dark_eval, None, "dark_eval")


def mean_luminance(images: list[Image]) -> float:
    return float(np.mean([img.pixels.mean() for img in images]))
