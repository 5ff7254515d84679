"""Detection-quality measurement: IoU, average precision, PR-curve export."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from darkadapt.data import Domain, GroundTruthBox, Image, load_image
from darkadapt.detector import Detection, DetectionSet, Detector, detect
from darkadapt.enhance import CurveEstimator, enhance
from darkadapt.exceptions import ContractViolation, DarkAdaptError

PREPROCESSING_MODES = ("none", "enhance-weak", "enhance-strong")


def iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    if ax1 >= ax2 or ay1 >= ay2 or bx1 >= bx2 or by1 >= by2:
        raise ContractViolation("degenerate box passed to iou")
    ix = min(ax2, bx2) - max(ax1, bx1)
    iy = min(ay2, by2) - max(ay1, by1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


@dataclass
class PRCurve:
    recalls: np.ndarray
    precisions: np.ndarray
    ap: float

    def __post_init__(self):
        if self.recalls.size and np.any(np.diff(self.recalls) < 0):
            raise ContractViolation("recall must be non-decreasing along the curve")


def average_precision(
    detections: dict[str, DetectionSet],
    ground_truth: dict[str, list[GroundTruthBox]],
    iou_threshold: float = 0.5,
) -> tuple[float, PRCurve]:
    """Greedy-matched AP with the continuous precision envelope.

    Detections are ranked by descending score across all images; each one
    matches the highest-IoU unmatched ground-truth box of its image if
    that IoU clears the threshold. AP integrates the monotone precision
    envelope over recall.
    """
    num_gt = sum(len(boxes) for boxes in ground_truth.values())
    if num_gt == 0:
        warnings.warn("no ground-truth boxes; average precision defined as 0", stacklevel=2)
        return 0.0, PRCurve(np.zeros(0), np.zeros(0), 0.0)

    ranked: list[tuple[float, str, np.ndarray]] = []
    for image_id, det_set in detections.items():
        for det in det_set.detections:
            ranked.append((det.score, image_id, np.asarray(det.box, dtype=np.float64)))
    ranked.sort(key=lambda t: -t[0])

    gt_arrays = {k: np.array([b.as_array() for b in v]) if v else np.zeros((0, 4)) for k, v in ground_truth.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in ground_truth.items()}

    tp = np.zeros(len(ranked))
    fp = np.zeros(len(ranked))
    for i, (_, image_id, box) in enumerate(ranked):
        gts = gt_arrays.get(image_id)
        if gts is None or gts.shape[0] == 0:
            fp[i] = 1
            continue
        flags = used[image_id]
        best_iou, best_j = 0.0, -1
        for j in range(gts.shape[0]):
            if flags[j]:
                continue
            v = iou(box, gts[j])
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            tp[i] = 1
            flags[best_j] = True
        else:
            fp[i] = 1

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recalls = cum_tp / num_gt
    precisions = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    ap = _envelope_area(recalls, precisions)
    return ap, PRCurve(recalls, precisions, ap)


def _envelope_area(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """Area under the monotone (from the right) precision envelope."""
    mrec = np.concatenate([[0.0], recalls, [1.0]])
    mpre = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


# ---------------------------------------------------------------------------
# Run-level evaluation


@dataclass
class EvalReport:
    split: str
    preprocessing: str
    ap: float
    ap_defined: bool
    num_images: int
    num_gt: int
    config_hash: str
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "split": self.split,
            "preprocessing": self.preprocessing,
            "ap": self.ap,
            "ap_defined": self.ap_defined,
            "num_images": self.num_images,
            "num_gt": self.num_gt,
            "config_hash": self.config_hash,
            **self.extras,
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def evaluate_images(
    detector: Detector,
    images: list[Image],
    ground_truth: dict[str, list[GroundTruthBox]],
    preprocessing: str = "none",
    enhancer: CurveEstimator | None = None,
    split_name: str = "eval",
    config_hash: str = "",
) -> tuple[EvalReport, PRCurve]:
    """Detect on (optionally brightened) images and score against labels."""
    if preprocessing not in PREPROCESSING_MODES:
        raise ContractViolation(f"unknown preprocessing {preprocessing!r}")
    if preprocessing != "none" and enhancer is None:
        raise ContractViolation(f"preprocessing {preprocessing!r} requires an enhancer")
    if not images:
        report = EvalReport(split_name, preprocessing, 0.0, False, 0, 0, config_hash)
        return report, PRCurve(np.zeros(0), np.zeros(0), 0.0)
    detections: dict[str, DetectionSet] = {}
    for img in images:
        fed = img
        if preprocessing != "none":
            fed = enhance(enhancer, img) if img.domain is Domain.L else img
        detections[img.id] = detect(detector, fed)
    gt = {img.id: ground_truth.get(img.id, []) for img in images}
    num_gt = sum(len(v) for v in gt.values())
    if num_gt == 0:
        ap, curve = 0.0, PRCurve(np.zeros(0), np.zeros(0), 0.0)
        warnings.warn("evaluation split has no ground-truth boxes", stacklevel=2)
    else:
        ap, curve = average_precision(detections, gt)
    report = EvalReport(split_name, preprocessing, ap, num_gt > 0, len(images), num_gt, config_hash)
    return report, curve


def evaluate_run(
    detector: Detector,
    manifest: list[str],
    images_root: str | Path,
    ground_truth: dict[str, list[GroundTruthBox]],
    preprocessing: str,
    enhancer: CurveEstimator | None,
    out_dir: str | Path | None = None,
    split_name: str = "eval",
    config_hash: str = "",
) -> tuple[EvalReport, PRCurve]:
    """File-level wrapper: load split images, evaluate, write report artifacts."""
    images_root = Path(images_root)
    images = []
    for rel in manifest:
        path = images_root / rel
        if not path.exists():
            raise DarkAdaptError(f"image listed in manifest not found: {path}")
        images.append(load_image(path, Domain.L, image_id=Path(rel).stem))
    report, curve = evaluate_images(
        detector, images, ground_truth, preprocessing, enhancer, split_name, config_hash
    )
    if out_dir is not None:
        write_report(report, curve, out_dir)
    return report, curve


def write_report(report: EvalReport, curve: PRCurve, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    lines = ["recall\tprecision"]
    for r, p in zip(curve.recalls, curve.precisions):
        lines.append(f"{r:.9f}\t{p:.9f}")
    (out_dir / "pr_curve.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    plot_pr_curve(curve, out_dir / "pr_curve.png", title=f"{report.split} ({report.preprocessing})")


def plot_pr_curve(curve: PRCurve, out_path: str | Path, title: str = "PR curve") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    if curve.recalls.size:
        ax.plot(curve.recalls, curve.precisions, lw=1.5)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"{title}  AP={curve.ap:.4f}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)


def load_annotation_file(path: str | Path) -> dict[str, list[GroundTruthBox]]:
    """Read a WIDER-layout annotation file into an id -> boxes mapping."""
    from darkadapt.data import parse_annotations

    path = Path(path)
    if not path.exists():
        raise DarkAdaptError(f"annotation file not found: {path}")
    entries, _ = parse_annotations(path.read_text(encoding="utf-8"))
    return {Path(p).stem: boxes for p, boxes in entries}
