"""Images, annotations, dataset splits, and deterministic randomness.

Images are stored as float32 rasters in [0, 1] and carry a domain tag so
pipeline stages can check they are being fed the right kind of data.
8-bit quantization only happens at file export.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from darkadapt.exceptions import AnnotationParseError, ContractViolation, DarkAdaptError


class Domain(enum.Enum):
    """Pixel-level state of an image within the adaptation pipeline."""

    L = "L"      # raw dark
    EL = "EL"    # brightened dark
    H = "H"      # bright / normal light
    DH = "DH"    # degraded bright
    BLUR = "BLUR"  # intermediate color-guidance blur


@dataclass
class Image:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    domain: Domain
    id: str = ""

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def retagged(self, domain: Domain) -> "Image":
        return Image(pixels=self.pixels, domain=domain, id=self.id)

    def copy(self) -> "Image":
        return Image(pixels=self.pixels.copy(), domain=self.domain, id=self.id)


def assert_valid_image(image: Image) -> None:
    """Shared range/shape check used by every stage that emits images."""
    px = image.pixels
    if px.ndim != 3 or px.shape[2] != 3:
        raise ContractViolation(f"expected (H, W, 3) raster, got shape {px.shape}")
    if not np.issubdtype(px.dtype, np.floating):
        raise ContractViolation(f"expected float raster, got dtype {px.dtype}")
    lo, hi = float(px.min()), float(px.max())
    if lo < 0.0 or hi > 1.0:
        raise ContractViolation(f"pixel values outside [0, 1]: min={lo}, max={hi}")


@dataclass(frozen=True)
class GroundTruthBox:
    x1: float
    y1: float
    x2: float
    y2: float
    image_id: str = ""

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ContractViolation(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass
class ParseWarning:
    line_number: int
    message: str


AnnotationEntry = tuple[str, list[GroundTruthBox]]


def parse_annotations(text: str) -> tuple[list[AnnotationEntry], list[ParseWarning]]:
    """Parse annotation text in the path / count / ``x y w h ...`` layout.

    Boxes are converted from (x, y, w, h) to (x1, y1, x2, y2). Trailing
    attribute fields after the first four numbers are ignored. Boxes with
    non-positive width or height are dropped and recorded as warnings.
    """
    entries: list[AnnotationEntry] = []
    warnings: list[ParseWarning] = []
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        path = lines[i].strip()
        if not path:
            i += 1
            continue
        if i + 1 >= len(lines):
            raise AnnotationParseError(i + 2, f"missing box count after {path!r}")
        count_line = lines[i + 1].strip()
        try:
            count = int(count_line)
        except ValueError:
            raise AnnotationParseError(i + 2, f"malformed box count {count_line!r}") from None
        if count < 0:
            raise AnnotationParseError(i + 2, f"negative box count {count}")
        boxes: list[GroundTruthBox] = []
        for j in range(count):
            lineno = i + 2 + j
            if lineno >= len(lines):
                raise AnnotationParseError(lineno + 1, "unexpected end of annotation text")
            parts = lines[lineno].split()
            if len(parts) < 4:
                raise AnnotationParseError(lineno + 1, f"expected at least 4 fields, got {len(parts)}")
            try:
                x, y, w, h = (float(v) for v in parts[:4])
            except ValueError:
                raise AnnotationParseError(lineno + 1, f"non-numeric coordinates in {lines[lineno]!r}") from None
            if w <= 0 or h <= 0:
                warnings.append(ParseWarning(lineno + 1, f"dropped degenerate box w={w} h={h} for {path}"))
                continue
            boxes.append(GroundTruthBox(x, y, x + w, y + h, image_id=path))
        entries.append((path, boxes))
        i += 2 + count
    return entries, warnings


def serialize_annotations(entries: list[AnnotationEntry]) -> str:
    """Inverse of :func:`parse_annotations` (attribute fields are not kept)."""
    out: list[str] = []
    for path, boxes in entries:
        out.append(path)
        out.append(str(len(boxes)))
        for b in boxes:
            out.append(f"{_fmt(b.x1)} {_fmt(b.y1)} {_fmt(b.x2 - b.x1)} {_fmt(b.y2 - b.y1)}")
    return "\n".join(out) + "\n"


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def load_image(path: str | Path, domain: Domain, image_id: str | None = None) -> Image:
    """Load an 8-bit RGB file and scale it to a [0, 1] float raster."""
    path = Path(path)
    try:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise DarkAdaptError(f"cannot read image file: {path}") from None
    except Exception as exc:
        raise DarkAdaptError(f"cannot decode image file {path}: {exc}") from exc
    pixels = arr / 255.0
    return Image(pixels=pixels, domain=domain, id=image_id if image_id is not None else path.stem)


def save_image(image: Image, path: str | Path) -> None:
    """Quantize to 8 bits and write a PNG/JPEG file."""
    assert_valid_image(image)
    arr = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(Path(path))


# ---------------------------------------------------------------------------
# Deterministic randomness


def seeded_rng(seed: int) -> np.random.Generator:
    """Random stream fully determined by the seed."""
    return np.random.default_rng(seed)


def fork_rng(seed: int, name: str) -> np.random.Generator:
    """Independent substream reproducible from (seed, name).

    Used to give each module / worker its own stream so that adding a
    consumer in one place does not shift the draws seen by another.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


# ---------------------------------------------------------------------------
# Dataset splits and manifests


@dataclass
class DatasetSplit:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if (sets[0] & sets[1]) or (sets[0] & sets[2]) or (sets[1] & sets[2]):
            raise ContractViolation("split parts must be pairwise disjoint")


def split_dataset(ids: list[str], sizes: tuple[int, int, int], rng: np.random.Generator) -> DatasetSplit:
    """Shuffle ids and cut train/val/test parts of the requested sizes."""
    n_train, n_val, n_test = sizes
    if min(sizes) < 0:
        raise ContractViolation("split sizes must be nonnegative")
    if n_train + n_val + n_test > len(ids):
        raise ContractViolation(
            f"requested split sizes sum to {n_train + n_val + n_test} > corpus size {len(ids)}"
        )
    order = list(ids)
    perm = rng.permutation(len(order))
    shuffled = [order[i] for i in perm]
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:n_train + n_val + n_test],
    )


def write_manifest(paths: list[str], out_path: str | Path) -> None:
    Path(out_path).write_text("".join(p + "\n" for p in paths), encoding="utf-8")


def read_manifest(path: str | Path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise DarkAdaptError(f"manifest file not found: {path}")
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
