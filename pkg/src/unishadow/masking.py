"""Otsu shadow masks from input/output differences.

The mask marks pixels the generator changed a lot (1 = shadow).  Otsu runs on
the magnitude of the greyscale difference, histogrammed into 256 uniform bins
over that map's own min-max range.
"""
from __future__ import annotations

import numpy as np
import torch

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
NUM_BINS = 256


def to_greyscale(image: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of a (..., 3, H, W) tensor, keeping a singleton channel axis."""
    if image.shape[-3] != 3:
        raise ValueError(f"expected 3 channels, got shape {tuple(image.shape)}")
    w = torch.tensor(LUMA_WEIGHTS, dtype=image.dtype, device=image.device).view(3, 1, 1)
    return (image * w).sum(dim=-3, keepdim=True)


def _otsu(values: np.ndarray) -> tuple[float, int, np.ndarray | None]:
    """Return (threshold, split bin k, per-value bin index).

    Values in bins ``>= k`` form the upper class.  A constant map returns its
    constant, ``k = NUM_BINS`` (nothing in the upper class) and no bin index.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty map")
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        return lo, NUM_BINS, None
    idx = np.floor((v - lo) / (hi - lo) * NUM_BINS).astype(np.int64)
    np.clip(idx, 0, NUM_BINS - 1, out=idx)
    hist = np.bincount(idx, minlength=NUM_BINS).astype(np.int64)

    n = int(hist.sum())
    w0 = np.cumsum(hist)[:-1]  # class-0 count for split k = 1..255
    s0 = np.cumsum(hist * np.arange(NUM_BINS, dtype=np.int64))[:-1]
    total = int(s0[-1] + hist[-1] * (NUM_BINS - 1))
    w1 = n - w0
    # w0*w1*(mu0 - mu1)^2 == (n*s0 - w0*total)^2 / (w0*w1); the numerator is exact in int64
    d = (n * s0 - w0 * total).astype(np.float64)
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros(NUM_BINS - 1)
    between[valid] = d[valid] ** 2 / (w0[valid].astype(np.float64) * w1[valid])
    k = int(np.argmax(between)) + 1
    return lo + k * (hi - lo) / NUM_BINS, k, idx


def otsu_threshold(grey) -> float:
    """Threshold maximising between-class variance; ties go to the lowest bin."""
    if isinstance(grey, torch.Tensor):
        grey = grey.detach().cpu().numpy()
    return _otsu(grey)[0]


def otsu_binarize(grey) -> np.ndarray:
    """Boolean map: True where a value falls in the upper Otsu class."""
    if isinstance(grey, torch.Tensor):
        grey = grey.detach().cpu().numpy()
    grey = np.asarray(grey)
    _, k, idx = _otsu(grey)
    if idx is None:
        return np.zeros(grey.shape, dtype=bool)
    return (idx >= k).reshape(grey.shape)


def compute_shadow_mask(inp: torch.Tensor, out: torch.Tensor) -> torch.Tensor:
    """Binary mask (1 = shadow) of shape (..., 1, H, W), computed per image.

    Accepts single images (3, H, W) or batches (B, 3, H, W).  No gradients flow.
    """
    if inp.shape != out.shape:
        raise ValueError(f"shape mismatch: {tuple(inp.shape)} vs {tuple(out.shape)}")
    with torch.no_grad():
        grey = to_greyscale(inp.detach() - out.detach()).abs()
        flat = grey.reshape(-1, *grey.shape[-3:]).cpu().numpy()
        masks = np.stack([otsu_binarize(g) for g in flat])
    return torch.from_numpy(masks.reshape(grey.shape)).to(dtype=inp.dtype, device=inp.device)


def invert_mask(mask: torch.Tensor) -> torch.Tensor:
    return 1 - mask
