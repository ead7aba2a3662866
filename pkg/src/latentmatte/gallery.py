"""Qualitative result grids: one panel strip per enhancement result."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image, ImageDraw

from .dataset import TRIMAP_SCALE

_SCALE = 2        # nearest-neighbour upscale for visibility
_LABEL_H = 12
_GAP = 4

PANELS = ("original", "enhanced", "perturbation", "trimaps", "mattes", "composites")


def _to_rgb8(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    return np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)


def _stack_pair(top: np.ndarray, bottom: np.ndarray) -> np.ndarray:
    gap = np.full((2, top.shape[1], 3), 255, dtype=np.uint8)
    return np.concatenate([top, gap, bottom], axis=0)


def _result_panels(r) -> list:
    tri_base = r.baseline_trimap.astype(np.float64) * TRIMAP_SCALE / 255.0
    tri_enh = r.enhanced_trimap.astype(np.float64) * TRIMAP_SCALE / 255.0
    return [
        _to_rgb8(r.original_image),
        _to_rgb8(r.enhanced_image),
        _to_rgb8(r.perturbation),
        _stack_pair(_to_rgb8(tri_base), _to_rgb8(tri_enh)),
        _stack_pair(_to_rgb8(r.baseline_alpha), _to_rgb8(r.enhanced_alpha)),
        _stack_pair(_to_rgb8(r.baseline_composite), _to_rgb8(r.composite)),
    ]


def _compose_grid(panels: list) -> Image.Image:
    tiles = []
    max_h = 0
    for p in panels:
        img = Image.fromarray(p).resize(
            (p.shape[1] * _SCALE, p.shape[0] * _SCALE), Image.NEAREST)
        tiles.append(img)
        max_h = max(max_h, img.height)
    width = sum(t.width for t in tiles) + _GAP * (len(tiles) + 1)
    canvas = Image.new("RGB", (width, max_h + _LABEL_H + 2 * _GAP), "white")
    draw = ImageDraw.Draw(canvas)
    x = _GAP
    for label, tile in zip(PANELS, tiles):
        draw.text((x, 1), label, fill="black")
        canvas.paste(tile, (x, _LABEL_H + _GAP))
        x += tile.width + _GAP
    return canvas


def emit_gallery(results: list, path: str) -> list:
    """One labeled grid per result plus an index page; returns file paths."""
    if not results:
        raise ValueError("emit_gallery needs at least one result")
    os.makedirs(path, exist_ok=True)
    files = []
    for i, r in enumerate(results):
        name = f"grid_{i:05d}.png"
        _compose_grid(_result_panels(r)).save(os.path.join(path, name))
        files.append(name)
    lines = ["<html><body>"]
    for name in files:
        lines.append(f'<div><h3>{name}</h3><img src="{name}"/></div>')
    lines.append("</body></html>")
    index = os.path.join(path, "index.html")
    with open(index, "w") as f:
        f.write("\n".join(lines) + "\n")
    return [os.path.join(path, n) for n in files] + [index]
