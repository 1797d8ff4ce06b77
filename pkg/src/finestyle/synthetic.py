"""Procedurally styled images whose style label is known by construction.

Every image is one of a few shapes (the content) rendered with one of a few
textures/palettes (the style). Used for desk-scale fixtures and tests.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

SHAPES = ("circle", "square", "triangle", "cross")
STYLES = ("stripes", "checker", "dots")
STYLE_TAGS = {"stripes": "Stripe Pattern", "checker": "Checker Pattern", "dots": "Dot Pattern"}


def _shape_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    cx, cy = rng.uniform(0.4, 0.6, size=2)
    r = rng.uniform(0.22, 0.32)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 < r**2
    if shape == "square":
        return (abs(xx - cx) < r) & (abs(yy - cy) < r)
    if shape == "triangle":
        return (yy - cy < r) & (yy - cy > -r + 2 * abs(xx - cx))
    if shape == "cross":
        return ((abs(xx - cx) < r / 3) & (abs(yy - cy) < r)) | ((abs(yy - cy) < r / 3) & (abs(xx - cx) < r))
    raise ValueError(f"unknown shape {shape!r}")


def _texture(style: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = size / 8 * rng.uniform(0.9, 1.1)
    phase = rng.uniform(0, period)
    if style == "stripes":
        return ((xx + yy + phase) // (period / 2)) % 2
    if style == "checker":
        return ((xx + phase) // period + (yy + phase) // period) % 2
    if style == "dots":
        u = ((xx + phase) % period) / period - 0.5
        v = ((yy + phase) % period) / period - 0.5
        return (u**2 + v**2 < 0.09).astype(np.float64)
    raise ValueError(f"unknown style {style!r}")


_PALETTES = {
    "stripes": ((0.9, 0.3, 0.2), (0.2, 0.2, 0.5)),
    "checker": ((0.1, 0.6, 0.3), (0.9, 0.9, 0.7)),
    "dots": ((0.3, 0.3, 0.9), (0.95, 0.8, 0.3)),
}


def render(shape: str, style: str, size: int = 64, seed: int = 0) -> np.ndarray:
    """HxWx3 float array in [0, 1]."""
    rng = np.random.default_rng(seed)
    tex = _texture(style, size, rng)[..., None]
    c1, c2 = (np.clip(np.array(c) + rng.normal(0, 0.05, 3), 0, 1) for c in _PALETTES[style])
    styled = tex * c1 + (1 - tex) * c2
    mask = _shape_mask(shape, size, rng)[..., None]
    background = np.full(3, rng.uniform(0.45, 0.55))
    img = np.where(mask, styled, 0.6 * background + 0.4 * styled)
    return img.astype(np.float32)


def styled_set(n_per_class: int, styles=STYLES, size: int = 64, seed: int = 0):
    """Return (images, labels) with ``n_per_class`` images per style."""
    images, labels = [], []
    for si, style in enumerate(styles):
        for k in range(n_per_class):
            shape = SHAPES[k % len(SHAPES)]
            images.append(render(shape, style, size, seed=seed * 100003 + si * 1009 + k))
            labels.append(style)
    return images, labels


def write_fixture_images(root: str | Path, n_per_class: int = 4, styles=STYLES, size: int = 64, seed: int = 0,
                         captions: dict[str, str] | None = None) -> Path:
    """Write PNGs as ``root/<tag>/<shape>_<k>.png`` plus recorded captions.

    ``captions.json`` maps paths relative to ``root`` to the caption a stub
    captioning service should return; ``captions`` overrides entries.
    """
    root = Path(root)
    recorded = {}
    for si, style in enumerate(styles):
        d = root / STYLE_TAGS.get(style, style)
        d.mkdir(parents=True, exist_ok=True)
        for k in range(n_per_class):
            shape = SHAPES[k % len(SHAPES)]
            arr = render(shape, style, size, seed=seed * 100003 + si * 1009 + k)
            rel = f"{d.name}/{shape}_{k}.png"
            Image.fromarray((arr * 255).round().astype(np.uint8)).save(root / rel)
            recorded[rel] = f"a {shape} on a plain background"
    recorded.update(captions or {})
    (root / "captions.json").write_text(json.dumps(recorded, indent=2, sort_keys=True))
    return root
