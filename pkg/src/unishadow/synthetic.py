"""Small synthetic datasets in the ISTD directory layout, for smoke runs and tests.

Each scene is a smooth coloured background with a few flat shapes.  Shadow
variants darken (and slightly blue-shift) a random soft-edged ellipse.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageFilter

SHADOW_GAIN = np.array([0.42, 0.47, 0.58])


def _scene(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    c0, c1 = rng.uniform(110, 235, 3), rng.uniform(110, 235, 3)
    t = (0.6 * xx + 0.4 * yy)[..., None]
    img = c0 * (1 - t) + c1 * t
    for _ in range(rng.integers(2, 5)):
        x0, y0 = rng.integers(0, w - w // 4), rng.integers(0, h - h // 4)
        x1, y1 = x0 + rng.integers(w // 8, w // 3), y0 + rng.integers(h // 8, h // 3)
        img[y0:y1, x0:x1] = rng.uniform(90, 245, 3)
    img += rng.normal(0, 3, img.shape)
    return np.clip(img, 0, 255)


def _shadow(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = rng.uniform(0.2, 0.8) * w, rng.uniform(0.2, 0.8) * h
    rx, ry = rng.uniform(0.15, 0.35) * w, rng.uniform(0.15, 0.35) * h
    hard = (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1).astype(np.uint8) * 255
    soft = Image.fromarray(hard).filter(ImageFilter.GaussianBlur(max(1.0, w / 160)))
    return np.asarray(soft, dtype=np.float64) / 255


def _write(folder: Path, name: str, arr: np.ndarray) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(arr), 0, 255).astype(np.uint8)).save(folder / name)


def write_scene(root: Path, split: str, scene: str, variants: int, rng: np.random.Generator,
                size: tuple[int, int]) -> None:
    w, h = size
    free = _scene(rng, w, h)
    for v in range(1, variants + 1):
        alpha = _shadow(rng, w, h)[..., None]
        gain = SHADOW_GAIN * rng.uniform(0.9, 1.1)
        shadowed = free * (1 - alpha + alpha * gain)
        name = f"{scene}-{v}.png"
        _write(root / f"{split}_A", name, shadowed)
        _write(root / f"{split}_B", name, (alpha[..., 0] > 0.5) * 255.0)
        _write(root / f"{split}_C", name, free)


def make_synthetic_dataset(root: str | Path, train_scenes: int = 20, variants: int = 4, test_images: int = 10,
                           size: tuple[int, int] = (160, 120), seed: int = 0) -> Path:
    """Write ``train_{A,B,C}`` and ``test_{A,B,C}`` folders under ``root``; returns ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for s in range(1, train_scenes + 1):
        write_scene(root, "train", str(s), variants, rng, size)
    for s in range(test_images):
        write_scene(root, "test", str(1000 + s), 1, rng, size)
    return root
