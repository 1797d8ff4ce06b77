"""Portable, byte-reproducible array checkpoints.

A checkpoint is an ``.npz``-compatible zip: one ``.npy`` member per array plus
``__meta__.json``. Entries carry a fixed timestamp so identical content gives
identical bytes (``np.savez`` stamps wall-clock time).
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from finestyle.inversion import StyleVector

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, **meta}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", _EPOCH), buf.getvalue())
        zf.writestr(zipfile.ZipInfo("__meta__.json", _EPOCH), json.dumps(meta, sort_keys=True, indent=1))
    return path


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("__meta__.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format_version')!r}")
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, meta


def save_style_vector(path: str | Path, sv: StyleVector) -> Path:
    meta = {"kind": "style_vector", "provenance": sv.provenance, "image_id": sv.source_image,
            "step": sv.step, "seed": sv.seed, **sv.meta}
    return save_arrays(path, {"tokens": sv.tokens.detach().cpu().numpy()}, meta)


def load_style_vector(path: str | Path) -> StyleVector:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "style_vector":
        raise ValueError(f"{path} is not a style vector checkpoint")
    return StyleVector(torch.from_numpy(arrays["tokens"]), meta["provenance"], meta.get("image_id", ""),
                       meta.get("step", 0), meta.get("seed"))


def save_module(path: str | Path, module: nn.Module, kind: str, mode: str, **extra) -> Path:
    state = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    meta = {"kind": kind, "mode": mode, "shapes": {k: list(v.shape) for k, v in state.items()}, **extra}
    return save_arrays(path, state, meta)


def load_module(path: str | Path, module: nn.Module, kind: str) -> dict:
    """Load parameters into ``module`` in place; returns the checkpoint metadata."""
    arrays, meta = load_arrays(path)
    if meta.get("kind") != kind:
        raise ValueError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    module.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return meta
