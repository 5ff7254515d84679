"""Versioned weight checkpoint container shared by all trainable modules.

Layout: a torch-serialized dict with a format version, the kind of model,
an echo of the config the model was built from, and named parameter blocks.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any

import torch

from darkadapt.exceptions import DarkAdaptError

FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: dict[str, Any],
    state_dicts: dict[str, dict],
    meta: dict[str, Any] | None = None,
) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "state_dicts": state_dicts,
        "meta": meta or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise DarkAdaptError(f"checkpoint file not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise DarkAdaptError(f"not a recognized checkpoint container: {path}")
    if payload["format_version"] != FORMAT_VERSION:
        raise DarkAdaptError(
            f"unsupported checkpoint version {payload['format_version']} in {path}"
        )
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise DarkAdaptError(
            f"expected a {expected_kind!r} checkpoint, found {payload.get('kind')!r} in {path}"
        )
    return payload
