"""Checkpoint directories: ``manifest.json`` plus one .athd tensor per array."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .backbone import ClipModel, TextBank, hash_arrays
from .config import VitConfig
from .data import read_tensor, write_tensor
from .errors import VersionError
from .tensor import Tensor

FORMAT = "athd-checkpoint"
VERSION = 1


def _file_name(key: str) -> str:
    return key.replace("/", "_") + ".athd"


def save_arrays(root, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for key in sorted(arrays):
        files[key] = _file_name(key)
        write_tensor(root / files[key], arrays[key])
    manifest = {"format": FORMAT, "version": VERSION, "fingerprint": hash_arrays(arrays),
                "files": files, **meta}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return root


def load_arrays(root) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise VersionError(f"{root}: unsupported checkpoint {manifest.get('format')!r} "
                           f"version {manifest.get('version')!r}")
    arrays = {k: read_tensor(root / f) for k, f in manifest["files"].items()}
    if hash_arrays(arrays) != manifest["fingerprint"]:
        raise VersionError(f"{root}: checkpoint contents do not match the manifest fingerprint")
    return arrays, manifest


def save_model(model: ClipModel, root, extra: dict | None = None) -> Path:
    meta = {"kind": "model", "vit": dataclasses.asdict(model.cfg), **(extra or {})}
    return save_arrays(root, model.frozen_arrays(), meta)


def load_model(root, expect: VitConfig | None = None) -> tuple[ClipModel, dict]:
    """Load a pretrained model; ``expect`` must equal the stored backbone config if given."""
    arrays, manifest = load_arrays(root)
    if manifest.get("kind") != "model":
        raise VersionError(f"{root}: not a model checkpoint")
    cfg = VitConfig(**manifest["vit"])
    if expect is not None and expect != cfg:
        raise VersionError(f"checkpoint backbone {cfg} does not match config {expect}")
    bank = TextBank(arrays.pop("text.raw"), arrays.pop("text.proj"),
                    arrays.pop("text.ln_gain"), arrays.pop("text.ln_bias"))
    params = {k: Tensor(v) for k, v in arrays.items()}
    return ClipModel(cfg, params, bank), manifest
