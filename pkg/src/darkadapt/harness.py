"""Experiment orchestration: specs, ablation sweeps, reproducible snapshots.

Every experiment directory contains the resolved config, the spec, the
seed, a content hash of all file inputs, the loss log, and the evaluation
report; re-running from that snapshot reproduces the logs byte for byte.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from darkadapt.adapt import train_adapt
from darkadapt.benchmark import Benchmark
from darkadapt.config import RunConfig, config_from_dict, config_hash, config_to_dict, save_config
from darkadapt.data import Domain, fork_rng, load_image, read_manifest
from darkadapt.detector import load_detector
from darkadapt.enhance import load_enhancer
from darkadapt.evaluation import evaluate_images, load_annotation_file, write_report
from darkadapt.exceptions import ContractViolation, DarkAdaptError

ENHANCE_VARIANTS = ("none", "weak", "strong")
CROSS_MODES = ("off", "cross", "h-only")


@dataclass
class ExperimentSpec:
    """One ablation row: pixel-level variant plus feature-loss toggles."""

    name: str
    enhance: str = "strong"
    jigsaw: bool = True
    cross_domain: str = "cross"
    el_up: bool = True
    adapt_iterations: int | None = None  # None -> config value; 0 -> no fine-tuning

    def __post_init__(self):
        if self.enhance not in ENHANCE_VARIANTS:
            raise ContractViolation(f"unknown enhance variant {self.enhance!r}")
        if self.cross_domain not in CROSS_MODES:
            raise ContractViolation(f"unknown cross-domain mode {self.cross_domain!r}")
        if not self.name:
            raise ContractViolation("experiment spec needs a name")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_ablation_specs(iterations: int | None = None) -> list[ExperimentSpec]:
    """Spec set covering the standard ablation table structure."""
    return [
        ExperimentSpec("raw", enhance="none", jigsaw=False, cross_domain="off", el_up=False, adapt_iterations=0),
        ExperimentSpec("weak", enhance="weak", jigsaw=False, cross_domain="off", el_up=False, adapt_iterations=0),
        ExperimentSpec("strong", enhance="strong", jigsaw=False, cross_domain="off", el_up=False, adapt_iterations=0),
        ExperimentSpec("jigsaw", enhance="strong", jigsaw=True, cross_domain="off", el_up=False, adapt_iterations=iterations),
        ExperimentSpec("h-only", enhance="strong", jigsaw=False, cross_domain="h-only", el_up=False, adapt_iterations=iterations),
        ExperimentSpec("crossdomain", enhance="strong", jigsaw=False, cross_domain="cross", el_up=False, adapt_iterations=iterations),
        ExperimentSpec("crossdomain-elup", enhance="strong", jigsaw=False, cross_domain="cross", el_up=True, adapt_iterations=iterations),
        ExperimentSpec("full", enhance="strong", jigsaw=True, cross_domain="cross", el_up=True, adapt_iterations=iterations),
    ]


def combo_ablation_specs(iterations: int | None = None, enhance: str = "strong") -> list[ExperimentSpec]:
    """All on/off combinations of the three feature-loss toggles."""
    specs = []
    for jig in (False, True):
        for cross in (False, True):
            for elup in (False, True):
                name = "combo-" + "".join("jx"[not jig]) + "".join("cx"[not cross]) + "".join("ex"[not elup])
                specs.append(
                    ExperimentSpec(
                        name=name,
                        enhance=enhance,
                        jigsaw=jig,
                        cross_domain="cross" if cross else "off",
                        el_up=elup,
                        adapt_iterations=iterations,
                    )
                )
    return specs


@dataclass
class ExperimentContext:
    """File-level inputs shared by every row of an ablation."""

    config: RunConfig
    benchmark_dir: Path
    pretrained: Path
    enhancers: dict[str, Path]
    out_root: Path
    _cache: dict = dataclasses.field(default_factory=dict, repr=False)

    def benchmark(self) -> Benchmark:
        if "benchmark" not in self._cache:
            self._cache["benchmark"] = load_benchmark(self.benchmark_dir)
        return self._cache["benchmark"]

    def inputs_hash(self) -> str:
        if "hash" not in self._cache:
            files = sorted(p for p in Path(self.benchmark_dir).rglob("*") if p.is_file())
            files.append(Path(self.pretrained))
            files.extend(Path(p) for _, p in sorted(self.enhancers.items()))
            digest = hashlib.sha256()
            for f in files:
                digest.update(str(f.name).encode())
                digest.update(f.read_bytes())
            self._cache["hash"] = digest.hexdigest()
        return self._cache["hash"]


def load_benchmark(benchmark_dir: str | Path) -> Benchmark:
    """Read a benchmark directory written by ``write_benchmark``."""
    root = Path(benchmark_dir)
    if not root.exists():
        raise DarkAdaptError(f"benchmark directory not found: {root}")
    bright_gt = load_annotation_file(root / "bright_train.txt")
    eval_gt = load_annotation_file(root / "dark_eval.txt")

    def _load(manifest_name: str, domain: Domain):
        rels = read_manifest(root / manifest_name)
        return [load_image(root / rel, domain, image_id=Path(rel).stem) for rel in rels]

    bright_imgs = _load("bright_train_manifest.txt", Domain.H)
    dark_train = _load("dark_train_manifest.txt", Domain.L)
    dark_eval_imgs = _load("dark_eval_manifest.txt", Domain.L)
    bright = [(img, bright_gt.get(img.id, [])) for img in bright_imgs]
    dark_eval = [(img, eval_gt.get(img.id, [])) for img in dark_eval_imgs]
    return Benchmark(bright=bright, dark_train=dark_train, dark_eval=dark_eval)


@dataclass
class ExperimentResult:
    name: str
    ap: float | None
    spec: ExperimentSpec
    error: str | None = None


def _effective_config(spec: ExperimentSpec, base: RunConfig) -> RunConfig:
    cfg = config_from_dict(config_to_dict(base))
    cfg.seed = int(fork_rng(base.seed, f"experiment:{spec.name}").integers(2 ** 31))
    cfg.weights.el_h = cfg.weights.el_h if spec.jigsaw else 0.0
    cfg.weights.h_dh = cfg.weights.h_dh if spec.cross_domain != "off" else 0.0
    cfg.weights.el_up = cfg.weights.el_up if spec.el_up else 0.0
    if spec.cross_domain == "h-only":
        # contrastive learning restricted to the bright domain itself
        cfg.contrastive.d_star_probability = 0.0
    if spec.adapt_iterations is not None:
        cfg.adapt_iterations = spec.adapt_iterations
    return cfg


def run_experiment(spec: ExperimentSpec, ctx: ExperimentContext) -> ExperimentResult:
    """Train (if requested) and evaluate one spec; write its snapshot dir."""
    exp_dir = Path(ctx.out_root) / spec.name
    exp_dir.mkdir(parents=True, exist_ok=True)
    cfg = _effective_config(spec, ctx.config)
    bench = ctx.benchmark()

    enhancer = None
    if spec.enhance != "none":
        if spec.enhance not in ctx.enhancers:
            raise DarkAdaptError(f"spec {spec.name!r} needs the {spec.enhance!r} enhancer checkpoint")
        enhancer = load_enhancer(ctx.enhancers[spec.enhance])

    save_config(cfg, exp_dir / "config.yaml")
    (exp_dir / "spec.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True), encoding="utf-8")
    (exp_dir / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")
    (exp_dir / "inputs.sha256").write_text(ctx.inputs_hash() + "\n", encoding="utf-8")
    (exp_dir / "inputs.yaml").write_text(
        yaml.safe_dump(
            {
                "benchmark_dir": str(Path(ctx.benchmark_dir).resolve()),
                "pretrained": str(Path(ctx.pretrained).resolve()),
                "enhancers": {k: str(Path(v).resolve()) for k, v in ctx.enhancers.items()},
            },
            sort_keys=True,
        ),
        encoding="utf-8",
    )

    if cfg.adapt_iterations > 0:
        detector, _ = train_adapt(
            cfg,
            ctx.pretrained,
            bench.bright,
            bench.dark_train,
            enhancer,
            out_dir=exp_dir,
        )
    else:
        detector = load_detector(ctx.pretrained)
        (exp_dir / "losses.jsonl").write_text("", encoding="utf-8")

    images = [img for img, _ in bench.dark_eval]
    gt = {img.id: boxes for img, boxes in bench.dark_eval}
    preprocessing = "none" if spec.enhance == "none" else f"enhance-{spec.enhance}"
    report, curve = evaluate_images(
        detector,
        images,
        gt,
        preprocessing=preprocessing,
        enhancer=enhancer,
        split_name="dark_eval",
        config_hash=config_hash(cfg),
    )
    write_report(report, curve, exp_dir)
    return ExperimentResult(name=spec.name, ap=report.ap, spec=spec)


def run_ablation(specs: list[ExperimentSpec], ctx: ExperimentContext) -> list[ExperimentResult]:
    """Run every spec sequentially; one row failing does not stop the rest."""
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ContractViolation(f"duplicate experiment names: {sorted(names)}")
    results: list[ExperimentResult] = []
    for spec in specs:
        try:
            results.append(run_experiment(spec, ctx))
        except Exception as exc:  # row isolation: record and continue
            results.append(ExperimentResult(name=spec.name, ap=None, spec=spec, error=str(exc)))
    results.sort(key=lambda r: (-(r.ap if r.ap is not None else -1.0), r.name))
    return results


def results_table(results: list[ExperimentResult]) -> str:
    """Delimiter-separated results table, best row first."""
    lines = ["name\tap\tenhance\tjigsaw\tcross_domain\tel_up\terror"]
    for r in results:
        ap = f"{r.ap:.6f}" if r.ap is not None else "-"
        lines.append(
            f"{r.name}\t{ap}\t{r.spec.enhance}\t{int(r.spec.jigsaw)}\t"
            f"{r.spec.cross_domain}\t{int(r.spec.el_up)}\t{r.error or '-'}"
        )
    return "\n".join(lines) + "\n"


def rerun_experiment(exp_dir: str | Path, out_dir: str | Path) -> ExperimentResult:
    """Re-execute an experiment from its snapshot directory."""
    exp_dir = Path(exp_dir)
    for required in ("spec.yaml", "config.yaml", "inputs.yaml"):
        if not (exp_dir / required).exists():
            raise DarkAdaptError(f"snapshot is missing {required}: {exp_dir}")
    spec = ExperimentSpec(**yaml.safe_load((exp_dir / "spec.yaml").read_text(encoding="utf-8")))
    inputs = yaml.safe_load((exp_dir / "inputs.yaml").read_text(encoding="utf-8"))
    # the snapshot stores the already-resolved per-spec seed; reuse the base
    # config so _effective_config reproduces it from the same derivation
    base_cfg_d = yaml.safe_load((exp_dir / "config.yaml").read_text(encoding="utf-8"))
    resolved_seed = int((exp_dir / "seed.txt").read_text().strip())
    ctx = ExperimentContext(
        config=config_from_dict(base_cfg_d),
        benchmark_dir=Path(inputs["benchmark_dir"]),
        pretrained=Path(inputs["pretrained"]),
        enhancers={k: Path(v) for k, v in inputs.get("enhancers", {}).items()},
        out_root=Path(out_dir),
    )
    result = _rerun_with_seed(spec, ctx, resolved_seed)
    return result


def _rerun_with_seed(spec: ExperimentSpec, ctx: ExperimentContext, seed: int) -> ExperimentResult:
    """Like run_experiment but pinning the already-resolved seed."""
    exp_dir = Path(ctx.out_root) / spec.name
    exp_dir.mkdir(parents=True, exist_ok=True)
    cfg = _effective_config(spec, ctx.config)
    cfg.seed = seed
    bench = ctx.benchmark()
    enhancer = None
    if spec.enhance != "none":
        enhancer = load_enhancer(ctx.enhancers[spec.enhance])
    save_config(cfg, exp_dir / "config.yaml")
    (exp_dir / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")
    if cfg.adapt_iterations > 0:
        detector, _ = train_adapt(cfg, ctx.pretrained, bench.bright, bench.dark_train, enhancer, out_dir=exp_dir)
    else:
        detector = load_detector(ctx.pretrained)
        (exp_dir / "losses.jsonl").write_text("", encoding="utf-8")
    images = [img for img, _ in bench.dark_eval]
    gt = {img.id: boxes for img, boxes in bench.dark_eval}
    preprocessing = "none" if spec.enhance == "none" else f"enhance-{spec.enhance}"
    report, curve = evaluate_images(
        detector, images, gt, preprocessing=preprocessing, enhancer=enhancer,
        split_name="dark_eval", config_hash=config_hash(cfg),
    )
    write_report(report, curve, exp_dir)
    return ExperimentResult(name=spec.name, ap=report.ap, spec=spec)
