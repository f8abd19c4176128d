"""Shadow-removal evaluation in CIELAB.

The literature labels these numbers RMSE, but the shared evaluation script
computes a mean absolute error.  Reports keep the ``rmse_*`` names for
comparability and state the real definition in ``metric_definition``.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DatasetManifest, IMAGE_EXTENSIONS, read_mask, read_rgb

METRIC_DEFINITION = "MAE in CIELAB"

# sRGB (D65) -> XYZ
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
_DELTA = 6 / 29


class EvaluationError(Exception):
    pass


def rgb_to_lab(rgb) -> np.ndarray:
    """sRGB in [0, 255] (uint8 or float, ... x 3) to CIELAB (D65, 2 degree observer)."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE_D65
    f = np.where(xyz > _DELTA ** 3, np.cbrt(xyz), xyz / (3 * _DELTA ** 2) + 4 / 29)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return np.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], axis=-1)


def region_mae(pred_lab: np.ndarray, gt_lab: np.ndarray, region: np.ndarray | None = None) -> float | None:
    """Mean |pred - gt| over region pixels and all three channels; None for an empty region."""
    if pred_lab.shape != gt_lab.shape:
        raise EvaluationError(f"shape mismatch: {pred_lab.shape} vs {gt_lab.shape}")
    diff = np.abs(pred_lab - gt_lab)
    if region is None:
        return float(diff.mean())
    region = np.asarray(region, dtype=bool)
    if region.shape != pred_lab.shape[:-1]:
        raise EvaluationError(f"region shape {region.shape} does not match image {pred_lab.shape[:-1]}")
    if not region.any():
        return None
    return float(diff[region].mean())


@dataclass
class ImageScore:
    image_id: str
    all: float
    shadow: float | None
    nonshadow: float | None
    shadow_pixels: int
    # sums of |Lab error| for pixel-weighted aggregation
    sum_all: float = 0.0
    sum_shadow: float = 0.0
    pixels: int = 0


def score_image(image_id: str, pred_rgb: np.ndarray, gt_rgb: np.ndarray, mask: np.ndarray) -> ImageScore:
    if pred_rgb.shape != gt_rgb.shape:
        raise EvaluationError(f"{image_id}: prediction {pred_rgb.shape} vs ground truth {gt_rgb.shape}")
    pred_lab, gt_lab = rgb_to_lab(pred_rgb), rgb_to_lab(gt_rgb)
    err = np.abs(pred_lab - gt_lab).sum(axis=-1)
    mask = np.asarray(mask, dtype=bool)
    return ImageScore(
        image_id=image_id,
        all=region_mae(pred_lab, gt_lab),
        shadow=region_mae(pred_lab, gt_lab, mask),
        nonshadow=region_mae(pred_lab, gt_lab, ~mask),
        shadow_pixels=int(mask.sum()),
        sum_all=float(err.sum()),
        sum_shadow=float(err[mask].sum()),
        pixels=int(mask.size),
    )


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


@dataclass
class EvalReport:
    rmse_all: float
    rmse_shadow: float | None
    rmse_nonshadow: float | None
    image_count: int
    per_image: list[ImageScore] = field(default_factory=list)
    metric_definition: str = METRIC_DEFINITION
    aggregation: str = "mean of per-image values"
    pixel_weighted: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores: list[ImageScore]) -> "EvalReport":
        if not scores:
            raise EvaluationError("nothing to evaluate")
        px = sum(s.pixels for s in scores)
        px_s = sum(s.shadow_pixels for s in scores)
        sum_all = sum(s.sum_all for s in scores)
        sum_s = sum(s.sum_shadow for s in scores)
        weighted = {
            "rmse_all": sum_all / (3 * px),
            "rmse_shadow": sum_s / (3 * px_s) if px_s else None,
            "rmse_nonshadow": (sum_all - sum_s) / (3 * (px - px_s)) if px > px_s else None,
        }
        return cls(
            rmse_all=_mean(s.all for s in scores),
            rmse_shadow=_mean(s.shadow for s in scores),
            rmse_nonshadow=_mean(s.nonshadow for s in scores),
            image_count=len(scores),
            per_image=scores,
            pixel_weighted=weighted,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_image"] = [
            {k: v for k, v in s.items() if k not in ("sum_all", "sum_shadow", "pixels")} for s in d["per_image"]
        ]
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def summary(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.2f}"
        return (f"RMSE(A)={fmt(self.rmse_all)} RMSE(S)={fmt(self.rmse_shadow)} "
                f"RMSE(N)={fmt(self.rmse_nonshadow)} over {self.image_count} images ({self.metric_definition})")


def _find_prediction(pred_dir: Path, image_id: str) -> Path | None:
    for ext in IMAGE_EXTENSIONS + (".npy",):
        cand = pred_dir / f"{image_id}{ext}"
        if cand.exists():
            return cand
    return None


def load_prediction(path: Path) -> np.ndarray:
    """8-bit image, or a float ``.npy`` in [-1, 1] (CHW or HWC) mapped to [0, 255] without rounding."""
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
        if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[-1] != 3:
            arr = arr.transpose(1, 2, 0)
        return (np.clip(arr, -1, 1) + 1) * 127.5
    return read_rgb(path)


def evaluate(manifest: DatasetManifest,
             predict: Callable[[np.ndarray], np.ndarray] | None = None,
             pred_dir: str | Path | None = None,
             size: tuple[int, int] | None = None,
             workers: int = 1) -> EvalReport:
    """Score predictions against the manifest's ground truth.

    Exactly one of ``predict`` (maps an 8-bit input image to an output image)
    or ``pred_dir`` (files named after each record's image id) must be given.
    ``size`` down-scales inputs and ground truth for reduced-resolution runs.
    """
    if (predict is None) == (pred_dir is None):
        raise EvaluationError("give exactly one of predict or pred_dir")
    records = list(manifest.records)
    incomplete = [r.image_id for r in records if r.mask_path is None or r.free_path is None]
    if incomplete:
        raise EvaluationError("records without ground truth: " + ", ".join(incomplete[:20]))
    pred_paths = {}
    if pred_dir is not None:
        pred_dir = Path(pred_dir)
        missing = []
        for r in records:
            p = _find_prediction(pred_dir, r.image_id)
            if p is None:
                missing.append(r.image_id)
            pred_paths[r.image_id] = p
        if missing:
            raise EvaluationError(f"{len(missing)} prediction(s) missing: " + ", ".join(missing[:50]))

    def one(rec):
        gt = read_rgb(rec.free_path, size)
        mask = read_mask(rec.mask_path, size)
        if predict is not None:
            pred = predict(read_rgb(rec.shadow_path, size))
        else:
            pred = load_prediction(pred_paths[rec.image_id])
        return score_image(rec.image_id, pred, gt, mask)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(one, records))
    else:
        scores = [one(r) for r in records]
    return EvalReport.from_scores(scores)

