"""Run configuration: one human-readable file drives a whole experiment.

CLI flags override file values; overrides use dotted paths into the
nested structure (``optimizer.lr_first=1e-3``).
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from darkadapt.contrastive import ContrastiveConfig
from darkadapt.degrade import BilateralParams, DegradeConfig
from darkadapt.detector import DetectorConfig
from darkadapt.exceptions import ContractViolation


@dataclass
class LossWeights:
    """Coefficients balancing the four terms of the adaptation objective."""

    det: float = 1.0
    el_h: float = 1.0     # puzzle term tying brightened-dark to bright
    h_dh: float = 1.0     # cross-domain contrastive term
    el_up: float = 1.0    # single-domain contrastive term on brightened-dark

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ContractViolation(f"loss weight {f.name} must be nonnegative")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(*(getattr(self, f.name) * factor for f in dataclasses.fields(self)))


@dataclass
class OptimizerConfig:
    """SGD settings; fine-tuning runs two phases at a fixed rate ratio."""

    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_first: float = 1e-4
    lr_second: float = 1e-5
    first_phase_fraction: float = 1.0 / 3.0

    def __post_init__(self):
        if not (0.0 < self.first_phase_fraction < 1.0):
            raise ContractViolation("first_phase_fraction must be in (0, 1) so both phases are nonempty")
        if self.lr_first <= 0 or self.lr_second <= 0:
            raise ContractViolation("learning rates must be positive")

    def lr_at(self, iteration: int, total: int) -> float:
        return self.lr_first if iteration < self.first_phase_fraction * total else self.lr_second


@dataclass
class RunConfig:
    seed: int = 0
    batch_size: int = 8
    ssl_batch_size: int = 8
    adapt_iterations: int = 300
    jigsaw_crop: int = 192  # SSL puzzle crop side; unstated upstream, so config-exposed
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    weights = LossWeights(**d.pop("weights", {}))
    optimizer = OptimizerConfig(**d.pop("optimizer", {}))
    contrastive = ContrastiveConfig(**d.pop("contrastive", {}))
    degrade_d = dict(d.pop("degrade", {}))
    bilateral = BilateralParams(**degrade_d.pop("bilateral", {}))
    if degrade_d.get("fixed_jitter") is not None:
        degrade_d["fixed_jitter"] = tuple(degrade_d["fixed_jitter"])
    degrade = DegradeConfig(bilateral=bilateral, **degrade_d)
    det_d = dict(d.pop("detector", {}))
    if "stage_channels" in det_d:
        det_d["stage_channels"] = tuple(det_d["stage_channels"])
    detector = DetectorConfig(**det_d)
    return RunConfig(
        weights=weights,
        optimizer=optimizer,
        contrastive=contrastive,
        degrade=degrade,
        detector=detector,
        **d,
    )


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True), encoding="utf-8")


def load_config(path: str | Path) -> RunConfig:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if raw is None:
        return RunConfig()
    if not isinstance(raw, dict):
        raise ContractViolation(f"config file {path} does not hold a mapping")
    return config_from_dict(raw)


def config_hash(cfg: RunConfig) -> str:
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``a.b.c=value`` assignments on top of a config.

    Values are coerced to the type of the field they replace.
    """
    d = config_to_dict(cfg)
    for assignment in assignments:
        if "=" not in assignment:
            raise ContractViolation(f"override {assignment!r} is not of the form key=value")
        key, _, raw_value = assignment.partition("=")
        node = d
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ContractViolation(f"unknown config key {key!r}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ContractViolation(f"unknown config key {key!r}")
        node[leaf] = _coerce(raw_value.strip(), node[leaf])
    return config_from_dict(d)


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ContractViolation(f"cannot parse {raw!r} as a boolean")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(float(raw))
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (list, tuple)):
        return yaml.safe_load(raw)
    if current is None:
        return yaml.safe_load(raw)
    return raw
