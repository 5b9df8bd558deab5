"""Dense checkpoints: a directory of raw little-endian float32 tensors plus ``manifest.json``.

Manifest layout::

    {
      "format": "f32le",
      "model": {"vocab": 96, "model_dim": 64, ...},      # optional
      "tensors": [{"name": "blocks.0.q", "rows": 64, "cols": 64, "file": "blocks.0.q.bin"}, ...]
    }

Vectors (norm weights) are stored as ``1 x D`` matrices.
"""

from __future__ import annotations

import json
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .core import FLOAT
from .errors import ManifestError
from .model import LINEAR_NAMES, BlockParams, CompressedBlock, ModelConfig, ToyLM

MANIFEST = "manifest.json"


def _manifest_path(path) -> Path:
    p = Path(path)
    return p / MANIFEST if p.is_dir() else p


def read_manifest(path) -> tuple[dict, dict | None]:
    """Load every tensor listed in a manifest. Returns ``(tensors, model_config_dict)``."""
    mpath = _manifest_path(path)
    try:
        meta = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {mpath}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: invalid JSON ({exc})") from None
    if isinstance(meta, list):
        meta = {"tensors": meta}
    if meta.get("format", "f32le") != "f32le":
        raise ManifestError(f"{mpath}: unsupported tensor format {meta.get('format')!r}")
    tensors = {}
    for entry in meta.get("tensors", []):
        try:
            name, rows, cols, fname = entry["name"], int(entry["rows"]), int(entry["cols"]), entry["file"]
        except (KeyError, TypeError, ValueError):
            raise ManifestError(f"{mpath}: malformed tensor entry {entry!r}") from None
        fpath = mpath.parent / fname
        try:
            raw = fpath.read_bytes()
        except FileNotFoundError:
            raise ManifestError(f"tensor file missing: {fpath} (tensor {name!r})") from None
        if len(raw) != 4 * rows * cols:
            raise ManifestError(f"{fpath}: expected {4 * rows * cols} bytes for {rows}x{cols}, got {len(raw)}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(FLOAT).reshape(rows, cols)
    return tensors, meta.get("model")


def write_manifest(directory, tensors: dict, model: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        if arr.ndim == 1:
            arr = arr[None, :]
        fname = f"{name}.bin"
        (d / fname).write_bytes(arr.tobytes())
        entries.append({"name": name, "rows": int(arr.shape[0]), "cols": int(arr.shape[1]), "file": fname})
    meta = {"format": "f32le", "tensors": entries}
    if model is not None:
        meta["model"] = model
    path = d / MANIFEST
    path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def lm_tensors(model: ToyLM) -> dict:
    """Named dense tensors of a model; compressed blocks are expanded via reconstruction."""
    out = {"embed": model.embed}
    for i, b in enumerate(model.blocks):
        dense = b.dense() if isinstance(b, CompressedBlock) else b
        for name in LINEAR_NAMES:
            out[f"blocks.{i}.{name}"] = dense.linears[name]
        out[f"blocks.{i}.attn_norm"] = b.attn_norm
        out[f"blocks.{i}.mlp_norm"] = b.mlp_norm
    out["final_norm"] = model.final_norm
    out["head"] = model.head
    return out


def save_lm(directory, model: ToyLM) -> Path:
    return write_manifest(directory, lm_tensors(model), asdict(model.config))


def load_lm(path) -> ToyLM:
    tensors, cfg = read_manifest(path)
    if cfg is None:
        raise ManifestError(f"{_manifest_path(path)}: no 'model' section; not a toy LM checkpoint")
    try:
        config = ModelConfig(**cfg)
    except TypeError as exc:
        raise ManifestError(f"bad model config: {exc}") from None

    def get(name):
        if name not in tensors:
            raise ManifestError(f"checkpoint lacks tensor {name!r}")
        return tensors[name]

    blocks = []
    for i in range(config.n_blocks):
        linears = {n: get(f"blocks.{i}.{n}") for n in LINEAR_NAMES}
        blocks.append(BlockParams(linears, get(f"blocks.{i}.attn_norm").reshape(-1),
                                  get(f"blocks.{i}.mlp_norm").reshape(-1), config.n_heads))
    return ToyLM(config, get("embed"), blocks, get("final_norm").reshape(-1), get("head"))


def attach_compressed(model: ToyLM, layers) -> ToyLM:
    """Swap dense blocks for compressed ones using CLSC layers named ``blocks.{i}.{proj}``."""
    by_name = {l.name: l for l in layers}
    blocks = []
    for i, b in enumerate(model.blocks):
        names = [f"blocks.{i}.{n}" for n in LINEAR_NAMES]
        present = [n in by_name for n in names]
        if all(present):
            blocks.append(CompressedBlock({n: by_name[f"blocks.{i}.{n}"] for n in LINEAR_NAMES},
                                          b.attn_norm, b.mlp_norm, b.n_heads))
        elif any(present):
            raise ManifestError(f"block {i}: CLSC file holds only some of its projections")
        else:
            blocks.append(b)
    unused = set(by_name) - {f"blocks.{i}.{n}" for i in range(len(model.blocks)) for n in LINEAR_NAMES}
    if unused:
        raise ManifestError(f"CLSC layers do not match the checkpoint: {sorted(unused)[:3]}")
    return replace(model, blocks=blocks)
