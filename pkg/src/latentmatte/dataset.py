"""Procedural portrait-like dataset with exact ground-truth alpha.

Each sample is composed as image = alpha * F + (1 - alpha) * B from a
procedural foreground (smooth blob body plus thin hair-like filaments,
feathered by Gaussian blur) over a textured background, so the alpha used
for compositing is known exactly. Trimaps are derived from alpha by
erosion of the definite regions.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, minimum_filter

from .errors import DatasetError

BG, UNK, FG = 0, 1, 2

# trimaps are stored as labels * TRIMAP_SCALE in 8-bit rasters
TRIMAP_SCALE = 127

_ALPHA_MAX = 65535  # alpha rasters are 16-bit


@dataclass
class Sample:
    image: np.ndarray      # H x W x 3 float32 in [0, 1]
    alpha: np.ndarray      # H x W float32 in [0, 1]
    trimap: np.ndarray     # H x W uint8 in {BG, UNK, FG}
    background_id: int = -1


@dataclass
class DatasetManifest:
    sample_count: int
    resolution: tuple[int, int]
    seed: int
    trimap_band: int
    split: str
    source_model_id: str = ""

    def __post_init__(self):
        if self.sample_count < 1:
            raise DatasetError("sample_count must be >= 1")
        if self.trimap_band < 1:
            raise DatasetError("trimap_band must be >= 1")


def quantize_alpha(alpha: np.ndarray) -> np.ndarray:
    """Snap alpha to the 16-bit grid so persistence is lossless."""
    q = np.round(np.clip(alpha, 0.0, 1.0) * _ALPHA_MAX)
    return (q / _ALPHA_MAX).astype(np.float32)


def _check_resolution(resolution):
    h, w = resolution
    for v in (h, w):
        if v < 32 or (v & (v - 1)) != 0:
            raise ValueError(f"resolution must be powers of two >= 32, got {resolution}")
    return h, w


def sample_background(pool_seed: int, resolution=(64, 64)) -> np.ndarray:
    """Textured background: low-frequency gradients plus band-limited noise."""
    h, w = resolution
    rng = np.random.default_rng(pool_seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)

    base = rng.uniform(0.15, 0.85, size=3)
    gx = rng.uniform(-0.5, 0.5, size=3)
    gy = rng.uniform(-0.5, 0.5, size=3)
    img = base[None, None, :] + gx * xx[..., None] + gy * yy[..., None]

    # radial blob of a second color
    cx, cy = rng.uniform(0.1, 0.9, size=2)
    rad = rng.uniform(0.2, 0.6)
    blob = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * rad**2)))
    img += blob[..., None] * rng.uniform(-0.35, 0.35, size=3)

    # band-limited noise
    sigma = rng.uniform(0.8, 2.5)
    noise = rng.standard_normal((h, w, 3))
    noise = gaussian_filter(noise, sigma=(sigma, sigma, 0))
    std = noise.std()
    if std > 0:
        noise /= std
    img += noise * rng.uniform(0.06, 0.2)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _draw_strand(mask, rng, cx, cy, rx, ry, h, w):
    phi = rng.uniform(0.0, np.pi)
    x = cx + rx * np.cos(phi)
    y = cy - ry * np.sin(phi) * rng.uniform(0.3, 1.0)
    ang = np.arctan2(-np.sin(phi), np.cos(phi)) + rng.normal(0.0, 0.3)
    length = rng.uniform(0.06, 0.22) * h
    steps = int(length / 0.5)
    for _ in range(steps):
        xi, yi = int(round(x)), int(round(y))
        if 0 <= yi < h and 0 <= xi < w:
            mask[yi, xi] = 1.0
        ang += rng.normal(0.0, 0.12) + 0.01  # slight downward drift
        x += 0.5 * np.cos(ang)
        y -= 0.5 * np.sin(ang)


def synth_layers(seed: int, resolution=(64, 64)):
    """Foreground, background, alpha, and background id for one sample."""
    h, w = _check_resolution(resolution)
    rng = np.random.default_rng(seed)
    background_id = int(rng.integers(0, 2**31 - 1))
    bg = sample_background(background_id, (h, w))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # head + body ellipses
    cx = w * (0.5 + rng.uniform(-0.08, 0.08))
    cy = h * (0.38 + rng.uniform(-0.06, 0.06))
    rx = w * rng.uniform(0.16, 0.24)
    ry = h * rng.uniform(0.20, 0.28)
    head = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0

    bx = cx + w * rng.uniform(-0.05, 0.05)
    by = h * rng.uniform(0.95, 1.1)
    brx = w * rng.uniform(0.26, 0.38)
    bry = h * rng.uniform(0.30, 0.45)
    body = ((xx - bx) / brx) ** 2 + ((yy - by) / bry) ** 2 <= 1.0

    mask = (head | body).astype(np.float64)
    for _ in range(int(rng.integers(8, 24))):
        _draw_strand(mask, rng, cx, cy, rx, ry, h, w)

    alpha = gaussian_filter(mask, sigma=rng.uniform(0.6, 1.0))
    # snap the blur tails so definite regions exist around the feathered band
    alpha[alpha < 0.01] = 0.0
    alpha[alpha > 0.99] = 1.0
    alpha = quantize_alpha(alpha)

    base = rng.uniform(0.2, 0.9, size=3)
    tex = gaussian_filter(rng.standard_normal((h, w, 3)), sigma=(h / 16, w / 16, 0))
    std = tex.std()
    if std > 0:
        tex /= std
    fg = np.clip(base[None, None, :] + 0.2 * tex, 0.0, 1.0).astype(np.float32)

    return fg, bg, alpha, background_id


def synth_sample(seed: int, resolution=(64, 64), trimap_band: int = 3) -> Sample:
    """One composited sample with exact ground-truth alpha and derived trimap."""
    fg, bg, alpha, background_id = synth_layers(seed, resolution)
    a = alpha[..., None]
    image = (a * fg + (1.0 - a) * bg).astype(np.float32)
    trimap = derive_trimap(alpha, trimap_band)
    return Sample(image=image, alpha=alpha, trimap=trimap, background_id=background_id)


def derive_trimap(alpha: np.ndarray, band: int,
                  fg_thresh: float = 1.0, bg_thresh: float = 0.0) -> np.ndarray:
    """Ternary map from alpha: eroded definite regions, UNK elsewhere.

    Erosion uses a square structuring element of side 2*band+1 with
    replicate padding at the borders. The thresholds default to exact 0/1
    membership; looser values are used when deriving trimaps from
    continuous predicted mattes.
    """
    if band < 1:
        raise ValueError("band must be >= 1")
    size = 2 * band + 1
    fg_mask = (alpha >= fg_thresh).astype(np.uint8)
    bg_mask = (alpha <= bg_thresh).astype(np.uint8)
    # minimum filter with nearest-neighbour border == erosion with replicate padding
    fg_er = minimum_filter(fg_mask, size=size, mode="nearest")
    bg_er = minimum_filter(bg_mask, size=size, mode="nearest")
    trimap = np.full(alpha.shape, UNK, dtype=np.uint8)
    trimap[fg_er == 1] = FG
    trimap[bg_er == 1] = BG
    return trimap


_MANIFEST_KEYS = ("sample_count", "resolution", "seed", "trimap_band", "split")
_OPTIONAL_KEYS = ("source_model_id",)


def _format_manifest(m: DatasetManifest) -> str:
    lines = [
        f"sample_count = {m.sample_count}",
        f"resolution = {m.resolution[0]}x{m.resolution[1]}",
        f"seed = {m.seed}",
        f"trimap_band = {m.trimap_band}",
        f"split = {m.split}",
    ]
    if m.source_model_id:
        lines.append(f"source_model_id = {m.source_model_id}")
    return "\n".join(lines) + "\n"


def _parse_manifest(text: str, path: str) -> DatasetManifest:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}: line {lineno} is not 'key = value': {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _MANIFEST_KEYS + _OPTIONAL_KEYS:
            raise DatasetError(f"{path}: unknown manifest key {key!r}")
        values[key] = raw
    for key in _MANIFEST_KEYS:
        if key not in values:
            raise DatasetError(f"{path}: missing manifest key {key!r}")
    try:
        count = int(values["sample_count"])
    except ValueError:
        raise DatasetError(f"{path}: bad value for key 'sample_count'") from None
    m = re.fullmatch(r"(\d+)x(\d+)", values["resolution"])
    if m is None:
        raise DatasetError(f"{path}: bad value for key 'resolution'")
    try:
        seed = int(values["seed"])
    except ValueError:
        raise DatasetError(f"{path}: bad value for key 'seed'") from None
    try:
        band = int(values["trimap_band"])
    except ValueError:
        raise DatasetError(f"{path}: bad value for key 'trimap_band'") from None
    split = values["split"]
    if split not in ("train", "test"):
        raise DatasetError(f"{path}: bad value for key 'split'")
    return DatasetManifest(
        sample_count=count,
        resolution=(int(m.group(1)), int(m.group(2))),
        seed=seed,
        trimap_band=band,
        split=split,
        source_model_id=values.get("source_model_id", ""),
    )


def save_dataset(samples: list[Sample], manifest: DatasetManifest, path: str) -> None:
    if len(samples) != manifest.sample_count:
        raise DatasetError(
            f"sample_count mismatch: manifest says {manifest.sample_count}, got {len(samples)}")
    for sub in ("images", "alphas", "trimaps"):
        os.makedirs(os.path.join(path, sub), exist_ok=True)
    for i, s in enumerate(samples):
        name = f"{i:05d}.png"
        img8 = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        cv2.imwrite(os.path.join(path, "images", name), img8[..., ::-1])
        a16 = np.round(np.clip(s.alpha, 0.0, 1.0) * _ALPHA_MAX).astype(np.uint16)
        cv2.imwrite(os.path.join(path, "alphas", name), a16)
        cv2.imwrite(os.path.join(path, "trimaps", name),
                    (s.trimap * TRIMAP_SCALE).astype(np.uint8))
    with open(os.path.join(path, "manifest.txt"), "w") as f:
        f.write(_format_manifest(manifest))


def load_dataset(path: str):
    mpath = os.path.join(path, "manifest.txt")
    if not os.path.isfile(mpath):
        raise DatasetError(f"missing manifest: {mpath}")
    with open(mpath) as f:
        manifest = _parse_manifest(f.read(), mpath)
    samples = []
    for i in range(manifest.sample_count):
        name = f"{i:05d}.png"
        ipath = os.path.join(path, "images", name)
        img = cv2.imread(ipath, cv2.IMREAD_COLOR)
        if img is None:
            raise DatasetError(f"missing or unreadable image: {ipath}")
        apath = os.path.join(path, "alphas", name)
        a16 = cv2.imread(apath, cv2.IMREAD_UNCHANGED)
        if a16 is None:
            raise DatasetError(f"missing or unreadable alpha: {apath}")
        tpath = os.path.join(path, "trimaps", name)
        tri = cv2.imread(tpath, cv2.IMREAD_GRAYSCALE)
        if tri is None:
            raise DatasetError(f"missing or unreadable trimap: {tpath}")
        samples.append(Sample(
            image=(img[..., ::-1].astype(np.float32) / 255.0),
            alpha=(a16.astype(np.float32) / _ALPHA_MAX),
            trimap=(tri // TRIMAP_SCALE).astype(np.uint8),
        ))
    return samples, manifest
