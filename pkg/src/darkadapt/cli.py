"""Command-line entry point for the full pipeline.

Subcommands: enhance, degrade, train-enhancer, train-noise, adapt,
evaluate, plot-pr, make-benchmark, ablate.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from darkadapt import benchmark as bench_mod
from darkadapt import harness
from darkadapt.adapt import pretrain_detector, train_adapt
from darkadapt.config import RunConfig, apply_overrides, config_hash, load_config, save_config
from darkadapt.data import Domain, load_image, read_manifest, save_image, seeded_rng
from darkadapt.degrade import (
    BilateralParams,
    DegradeConfig,
    NoiseModel,
    bilateral_blur,
    degrade,
    load_noise_model,
    save_noise_model,
    train_noise_model,
)
from darkadapt.detector import load_detector
from darkadapt.enhance import (
    CurveEstimatorConfig,
    EnhancerTrainConfig,
    enhance,
    load_enhancer,
    save_enhancer,
    train_enhancer,
)
from darkadapt.evaluation import (
    PRCurve,
    _envelope_area,
    evaluate_run,
    load_annotation_file,
    plot_pr_curve,
)
from darkadapt.exceptions import DarkAdaptError
from darkadapt.translation import TranslationTrainConfig

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _find_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DarkAdaptError(f"not a directory: {directory}")
    for manifest_name in ("manifest.txt", "dark_train_manifest.txt"):
        manifest = directory / manifest_name
        if manifest.exists():
            return [directory / rel for rel in read_manifest(manifest)]
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DarkAdaptError(f"no images found in {directory}")
    return files


def _find_annotations(directory: Path) -> Path:
    for name in ("annotations.txt", "bright_train.txt"):
        candidate = directory / name
        if candidate.exists():
            return candidate
    raise DarkAdaptError(f"no annotation file (annotations.txt) in {directory}")


def _load_labeled_dir(directory: Path) -> list[tuple]:
    ann_path = _find_annotations(directory)
    gt = load_annotation_file(ann_path)
    from darkadapt.data import parse_annotations

    entries, _ = parse_annotations(ann_path.read_text(encoding="utf-8"))
    labeled = []
    for rel, _boxes in entries:
        img = load_image(directory / rel, Domain.H, image_id=Path(rel).stem)
        labeled.append((img, gt.get(img.id, [])))
    return labeled


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    overrides = getattr(args, "set", None) or []
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


# ---------------------------------------------------------------------------
# Subcommand handlers


def cmd_enhance(args) -> int:
    estimator = load_enhancer(args.ckpt)
    expected = CurveEstimatorConfig.variant(args.variant)
    if estimator.config.iterations != expected.iterations:
        raise DarkAdaptError(
            f"checkpoint is a {estimator.config.iterations}-iteration model, "
            f"which does not match variant {args.variant!r}"
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in _find_images(Path(args.input)):
        img = load_image(path, Domain.L)
        result = enhance(estimator, img)
        save_image(result, out_dir / f"{path.stem}.png")
    print(f"enhanced {args.input} -> {out_dir}")
    return 0


def cmd_degrade(args) -> int:
    cfg = DegradeConfig(
        bilateral=BilateralParams(d=args.d, sigma_space=args.sigma_space, sigma_range=args.sigma_range),
        noise_kind=args.noise,
        gaussian_sigma=args.gaussian_sigma,
        poisson_scale=args.poisson_scale,
        noise_ckpt=args.noise_ckpt,
    )
    model = cfg.build_noise_model()
    rng = seeded_rng(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in _find_images(Path(args.input)):
        img = load_image(path, Domain.H)
        log: list = []
        result = degrade(img, model, rng, cfg, jitter_log=log)
        save_image(result, out_dir / f"{path.stem}.png")
        sidecar = dataclasses.asdict(log[0])
        (out_dir / f"{path.stem}.jitter.json").write_text(
            json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8"
        )
    print(f"degraded {args.input} -> {out_dir}")
    return 0


def cmd_train_enhancer(args) -> int:
    images = [load_image(p, Domain.L) for p in _find_images(Path(args.dark))]
    config = CurveEstimatorConfig.variant(args.variant)
    train_cfg = EnhancerTrainConfig(steps=args.steps, seed=args.seed, crop=args.crop, batch_size=args.batch_size)
    estimator, history = train_enhancer(config, images, train_cfg)
    save_enhancer(estimator, args.out)
    print(f"trained {args.variant} enhancer for {len(history)} steps -> {args.out}")
    if history:
        print(f"final loss {history[-1]['total']:.5f}")
    return 0


def cmd_train_noise(args) -> int:
    params = BilateralParams(d=args.d, sigma_space=args.sigma_space, sigma_range=args.sigma_range)
    pairs = []
    for path in _find_images(Path(args.dark)):
        img = load_image(path, Domain.EL)
        blurred = bilateral_blur(img, params)
        pairs.append((blurred, img.retagged(Domain.EL)))
    train_cfg = TranslationTrainConfig(steps=args.steps, seed=args.seed)
    model, history = train_noise_model(pairs, train_cfg)
    save_noise_model(model, args.out)
    print(f"trained noise model on {len(pairs)} pairs for {len(history)} steps -> {args.out}")
    if args.bright:
        # report the residual the model adds on held-out bright guidance
        from darkadapt.degrade import synth_noise

        residuals = []
        rng = seeded_rng(args.seed + 1)
        for path in _find_images(Path(args.bright))[:16]:
            img = load_image(path, Domain.H)
            blurred = bilateral_blur(img, params)
            noisy = synth_noise(model, blurred, rng)
            residuals.append(float(np.std(noisy.pixels - blurred.pixels)))
        print(f"held-out residual std on bright guidance: {np.mean(residuals):.4f}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_run_config(args)
    if args.no_jigsaw:
        cfg.weights.el_h = 0.0
    if args.no_crossdomain:
        cfg.weights.h_dh = 0.0
    if args.no_elup:
        cfg.weights.el_up = 0.0
    if args.iterations is not None:
        cfg.adapt_iterations = args.iterations

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    bright = _load_labeled_dir(Path(args.bright))
    dark = [load_image(p, Domain.L) for p in _find_images(Path(args.dark))]

    pretrained = args.pretrained
    if pretrained is None:
        if args.pretrain_iterations is None:
            raise DarkAdaptError("provide --pretrained CKPT or --pretrain-iterations N")
        pretrained = out_dir / "pretrained.pt"
        pretrain_detector(cfg, bright, args.pretrain_iterations, out_path=pretrained)
        print(f"pretrained detector for {args.pretrain_iterations} iterations -> {pretrained}")

    enhancer = load_enhancer(args.enhancer) if args.enhancer else None
    save_config(cfg, out_dir / "config.yaml")
    _, history = train_adapt(cfg, pretrained, bright, dark, enhancer, out_dir=out_dir)
    print(f"adapted for {len(history)} iterations -> {out_dir / 'adapted.pt'}")
    return 0


def cmd_evaluate(args) -> int:
    detector = load_detector(args.ckpt)
    manifest = read_manifest(args.split)
    gt = load_annotation_file(args.annotations)
    enhancer = load_enhancer(args.enhancer) if args.enhancer else None
    cfg = _load_run_config(args)
    report, _ = evaluate_run(
        detector,
        manifest,
        args.images_root,
        gt,
        preprocessing=args.preprocessing,
        enhancer=enhancer,
        out_dir=args.out,
        split_name=Path(args.split).stem,
        config_hash=config_hash(cfg),
    )
    print(report.to_json())
    return 0


def cmd_plot_pr(args) -> int:
    path = Path(args.curve)
    if not path.exists():
        raise DarkAdaptError(f"curve file not found: {path}")
    rows = [line.split("\t") for line in path.read_text(encoding="utf-8").splitlines()[1:] if line]
    recalls = np.array([float(r[0]) for r in rows])
    precisions = np.array([float(r[1]) for r in rows])
    ap = _envelope_area(recalls, precisions) if recalls.size else 0.0
    plot_pr_curve(PRCurve(recalls, precisions, ap), args.out, title=args.title)
    print(f"wrote {args.out}")
    return 0


def cmd_make_benchmark(args) -> int:
    rng = seeded_rng(args.seed)
    scene_cfg = bench_mod.SceneConfig(size=args.size)
    dark_cfg = bench_mod.DarkeningConfig(gamma=args.gamma)
    dark_cfg.degrade.gaussian_sigma = args.noise_sigma
    dark_cfg.degrade.bilateral = BilateralParams(d=args.d, sigma_space=args.sigma_space, sigma_range=args.sigma_range)
    sources = bench_mod.generate_scenes(args.count, rng, scene_cfg)
    bench = bench_mod.make_synthetic_benchmark(
        sources, dark_cfg, rng, n_bright=args.bright, n_dark_train=args.dark_train, n_dark_eval=args.dark_eval
    )
    bench_mod.write_benchmark(bench, args.out)
    print(
        f"benchmark at {args.out}: {len(bench.bright)} bright train, "
        f"{len(bench.dark_train)} dark train, {len(bench.dark_eval)} dark eval"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)

    pretrained = args.pretrained
    if pretrained is None:
        if args.pretrain_iterations is None:
            raise DarkAdaptError("provide --pretrained CKPT or --pretrain-iterations N")
        bench = harness.load_benchmark(args.benchmark)
        pretrained = out_root / "pretrained.pt"
        pretrain_detector(cfg, bench.bright, args.pretrain_iterations, out_path=pretrained)
        print(f"pretrained detector -> {pretrained}")

    enhancers = {}
    if args.enhancer_weak:
        enhancers["weak"] = Path(args.enhancer_weak)
    if args.enhancer_strong:
        enhancers["strong"] = Path(args.enhancer_strong)

    if args.specs:
        raw = yaml.safe_load(Path(args.specs).read_text(encoding="utf-8")) or []
        specs = [harness.ExperimentSpec(**d) for d in raw]
    elif args.combos:
        specs = harness.combo_ablation_specs(args.iterations)
    else:
        specs = harness.default_ablation_specs(args.iterations)

    ctx = harness.ExperimentContext(
        config=cfg,
        benchmark_dir=Path(args.benchmark),
        pretrained=Path(pretrained),
        enhancers=enhancers,
        out_root=out_root,
    )
    results = harness.run_ablation(specs, ctx)
    table = harness.results_table(results)
    (out_root / "results.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="darkadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="brighten dark images with a trained curve estimator")
    p.add_argument("--variant", choices=("weak", "strong"), required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("degrade", help="run the bright-to-degraded pipeline over a directory")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", choices=("learned", "parametric"), default="parametric")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-ckpt", default=None)
    p.add_argument("--gaussian-sigma", type=float, default=0.02)
    p.add_argument("--poisson-scale", type=float, default=0.0)
    p.add_argument("--d", type=int, default=25)
    p.add_argument("--sigma-space", type=float, default=75.0)
    p.add_argument("--sigma-range", type=float, default=75.0)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train-enhancer", help="fit a curve estimator on unlabeled dark images")
    p.add_argument("--variant", choices=("weak", "strong"), required=True)
    p.add_argument("--dark", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_train_enhancer)

    p = sub.add_parser("train-noise", help="fit the learned noise model on blurred/original pairs")
    p.add_argument("--bright", default=None, help="optional held-out bright images for a residual report")
    p.add_argument("--dark", required=True, help="images whose noise pattern to imitate")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=25)
    p.add_argument("--sigma-space", type=float, default=75.0)
    p.add_argument("--sigma-range", type=float, default=75.0)
    p.set_defaults(func=cmd_train_noise)

    p = sub.add_parser("adapt", help="fine-tune a pretrained detector against the dark domain")
    p.add_argument("--config", default=None)
    p.add_argument("--pretrained", default=None)
    p.add_argument("--bright", required=True)
    p.add_argument("--dark", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--enhancer", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--pretrain-iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-jigsaw", action="store_true")
    p.add_argument("--no-crossdomain", action="store_true")
    p.add_argument("--no-elup", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="measure detection quality on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--images-root", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--preprocessing", choices=("none", "enhance-weak", "enhance-strong"), default="none")
    p.add_argument("--enhancer", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-pr", help="render a PR curve table to an image")
    p.add_argument("--curve", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="PR curve")
    p.set_defaults(func=cmd_plot_pr)

    p = sub.add_parser("make-benchmark", help="generate the synthetic bright/dark benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=612)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--gamma", type=float, default=3.0)
    p.add_argument("--noise-sigma", type=float, default=0.03)
    p.add_argument("--d", type=int, default=9)
    p.add_argument("--sigma-space", type=float, default=75.0)
    p.add_argument("--sigma-range", type=float, default=75.0)
    p.add_argument("--bright", type=int, default=None)
    p.add_argument("--dark-train", type=int, default=None)
    p.add_argument("--dark-eval", type=int, default=None)
    p.set_defaults(func=cmd_make_benchmark)

    p = sub.add_parser("ablate", help="run an ablation sweep over experiment specs")
    p.add_argument("--config", default=None)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--pretrained", default=None)
    p.add_argument("--pretrain-iterations", type=int, default=None)
    p.add_argument("--enhancer-weak", default=None)
    p.add_argument("--enhancer-strong", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--specs", default=None, help="YAML list of experiment specs")
    p.add_argument("--combos", action="store_true", help="run all feature-loss toggle combinations")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DarkAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
