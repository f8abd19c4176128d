"""Dataset ingestion for ISTD/AISTD-style directory layouts.

A dataset root holds three sibling folders per split::

    <root>/<split>_A   shadow images
    <root>/<split>_B   binary shadow masks
    <root>/<split>_C   shadow-free images

(``<root>/<split>/<split>_A`` is accepted as well.)  AISTD keeps the same
layout but ships colour-adjusted shadow-free images, usually in
``<split>_C_fixed_official``.

Filenames encode the scene and the shadow variant as ``<scene>-<variant>.<ext>``,
e.g. ``104-3.png`` is the third shadow variant of scene ``104``.  The scene id
is everything before the last ``-``.
"""
from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
SPLITS = ("train", "test")
LAYOUTS = ("istd", "aistd")

_NAME_RE = re.compile(r"^(?P<scene>.+)-(?P<variant>[^-]+)$")
# AISTD shadow-free folders, in order of preference.
_AISTD_FREE_DIRS = ("{split}_C_fixed_official", "{split}_C_fixed_ours", "{split}_C_fixed", "{split}_C")


class DatasetError(Exception):
    """Raised for unusable dataset roots or manifests."""


class SamplingError(Exception):
    """Raised when a sampler has nothing valid to draw from."""


@dataclass(frozen=True)
class ManifestRecord:
    scene_id: str
    shadow_path: Path
    mask_path: Path | None = None
    free_path: Path | None = None

    @property
    def image_id(self) -> str:
        return self.shadow_path.stem


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    split: str
    records: tuple[ManifestRecord, ...]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        missing = []
        for rec in self.records:
            for p in (rec.shadow_path, rec.mask_path, rec.free_path):
                if p is not None and not p.exists():
                    missing.append(str(p))
            if self.split == "test" and (rec.mask_path is None or rec.free_path is None):
                raise DatasetError(f"test record {rec.image_id} lacks a mask or shadow-free image")
        if missing:
            raise DatasetError("missing files: " + ", ".join(missing[:10]))

    def __len__(self) -> int:
        return len(self.records)

    def scenes(self) -> dict[str, list[ManifestRecord]]:
        groups: dict[str, list[ManifestRecord]] = {}
        for rec in self.records:
            groups.setdefault(rec.scene_id, []).append(rec)
        return groups

    def subset(self, scene_ids: Iterable[str]) -> "DatasetManifest":
        keep = set(scene_ids)
        return DatasetManifest(self.root, self.split, tuple(r for r in self.records if r.scene_id in keep))

    def export(self, path: str | Path) -> None:
        """Write ``scene_id<TAB>shadow<TAB>mask<TAB>free`` lines (empty field for absent paths)."""
        with open(path, "w") as fh:
            for r in self.records:
                cols = [r.scene_id, str(r.shadow_path), str(r.mask_path or ""), str(r.free_path or "")]
                fh.write("\t".join(cols) + "\n")

    @classmethod
    def read(cls, path: str | Path, root: str | Path = ".", split: str = "train") -> "DatasetManifest":
        records = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                scene, shadow, mask, free = line.rstrip("\n").split("\t")
                records.append(ManifestRecord(scene, Path(shadow), Path(mask) if mask else None,
                                              Path(free) if free else None))
        return cls(Path(root), split, tuple(records))


@dataclass(frozen=True)
class ScenePair:
    """Two distinct shadow variants of one scene (the unify-step unit)."""

    scene_id: str
    a: ManifestRecord
    b: ManifestRecord

    def __post_init__(self):
        if self.a.scene_id != self.scene_id or self.b.scene_id != self.scene_id:
            raise ValueError("pair members must belong to the pair's scene")
        if self.a.shadow_path == self.b.shadow_path:
            raise ValueError("self-pairs are not allowed")


@dataclass(frozen=True)
class ReferenceImage:
    path: Path
    source_id: str


@dataclass(frozen=True)
class IdentityInput:
    path: Path
    scene_id: str


def scene_sort_key(scene_id: str):
    return (0, int(scene_id), "") if scene_id.isdigit() else (1, 0, scene_id)


def parse_scene_id(filename: str) -> str:
    m = _NAME_RE.match(Path(filename).stem)
    if m is None:
        raise ValueError(filename)
    return m.group("scene")


def _list_images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def _resolve_split_dir(root: Path, split: str, suffix: str) -> Path | None:
    for cand in (root / f"{split}_{suffix}", root / split / f"{split}_{suffix}"):
        if cand.is_dir():
            return cand
    return None


def load_manifest(root: str | Path, split: str = "train", layout: str = "istd") -> DatasetManifest:
    root = Path(root)
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
    if layout not in LAYOUTS:
        raise DatasetError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")

    shadow_dir = _resolve_split_dir(root, split, "A")
    if shadow_dir is None:
        raise DatasetError(f"no {split}_A directory under {root}")
    mask_dir = _resolve_split_dir(root, split, "B")
    free_suffixes = [s.format(split=split)[len(split) + 1:] for s in _AISTD_FREE_DIRS] if layout == "aistd" else ["C"]
    free_dir = None
    for suffix in free_suffixes:
        free_dir = _resolve_split_dir(root, split, suffix)
        if free_dir is not None:
            break

    shadows = _list_images(shadow_dir)
    if not shadows:
        raise DatasetError(f"{shadow_dir} contains no images")

    bad = []
    records = []
    for path in shadows:
        try:
            scene = parse_scene_id(path.name)
        except ValueError:
            bad.append(path.name)
            continue
        mask = _match(mask_dir, path)
        free = _match(free_dir, path)
        records.append(ManifestRecord(scene, path, mask, free))
    if bad:
        raise DatasetError(
            f"{len(bad)} filename(s) do not follow the <scene>-<variant> convention: " + ", ".join(bad[:20]))

    records.sort(key=lambda r: (scene_sort_key(r.scene_id), r.shadow_path.name))
    if split == "test":
        incomplete = [r.image_id for r in records if r.mask_path is None or r.free_path is None]
        if incomplete:
            raise DatasetError("test records without mask/shadow-free image: " + ", ".join(incomplete[:20]))
    manifest = DatasetManifest(root, split, tuple(records))
    log.info("loaded %s/%s: %d records, %d scenes", root, split, len(manifest), len(manifest.scenes()))
    return manifest


def _match(folder: Path | None, shadow_path: Path) -> Path | None:
    if folder is None:
        return None
    exact = folder / shadow_path.name
    if exact.exists():
        return exact
    for ext in IMAGE_EXTENSIONS:
        cand = folder / (shadow_path.stem + ext)
        if cand.exists():
            return cand
    return None


def split_validation(manifest: DatasetManifest, fraction: float) -> tuple[DatasetManifest, DatasetManifest]:
    """Hold out the last ``fraction`` of scenes (in scene order) as a validation slice."""
    scenes = sorted(manifest.scenes(), key=scene_sort_key)
    n_val = int(round(len(scenes) * fraction))
    if fraction > 0 and n_val == 0 and len(scenes) > 1:
        n_val = 1
    if n_val >= len(scenes):
        raise DatasetError("validation fraction leaves no training scenes")
    train_ids, val_ids = scenes[: len(scenes) - n_val], scenes[len(scenes) - n_val:]
    return manifest.subset(train_ids), manifest.subset(val_ids)


def count_pairs(manifest: DatasetManifest) -> int:
    return sum(len(v) * (len(v) - 1) // 2 for v in manifest.scenes().values())


def build_training_pairs(manifest: DatasetManifest, rng_seed: int) -> list[ScenePair]:
    """All unordered within-scene pairs, shuffled deterministically by ``rng_seed``."""
    pairs = []
    for scene in sorted(manifest.scenes(), key=scene_sort_key):
        recs = sorted(manifest.scenes()[scene], key=lambda r: r.shadow_path.name)
        pairs.extend(ScenePair(scene, a, b) for a, b in itertools.combinations(recs, 2))
    if not pairs:
        raise SamplingError("no scene has two or more shadow images; cannot form training pairs")
    order = np.random.default_rng(rng_seed).permutation(len(pairs))
    return [pairs[i] for i in order]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Per-epoch permutation of ``n`` pairs, a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def reference_pool(manifest: DatasetManifest) -> list[ReferenceImage]:
    seen = set()
    pool = []
    for r in manifest.records:
        if r.free_path is not None and r.free_path not in seen:
            seen.add(r.free_path)
            pool.append(ReferenceImage(r.free_path, r.free_path.stem))
    return pool


def reference_pool_from_dir(folder: str | Path) -> list[ReferenceImage]:
    folder = Path(folder)
    if not folder.is_dir():
        raise DatasetError(f"reference pool directory {folder} does not exist")
    return [ReferenceImage(p, p.stem) for p in _list_images(folder)]


def sample_reference(pool: Sequence[ReferenceImage], rng: np.random.Generator) -> ReferenceImage:
    if not pool:
        raise SamplingError("reference pool is empty")
    return pool[int(rng.integers(len(pool)))]


def sample_identity_input(manifest: DatasetManifest, excluded_scene: str,
                          rng: np.random.Generator) -> IdentityInput:
    candidates = [r for r in manifest.records if r.free_path is not None and r.scene_id != excluded_scene]
    if not candidates:
        raise SamplingError(f"no shadow-free image outside scene {excluded_scene!r}")
    rec = candidates[int(rng.integers(len(candidates)))]
    return IdentityInput(rec.free_path, rec.scene_id)


def normalize(raw) -> torch.Tensor:
    """Map 8-bit values in [0, 255] linearly onto [-1, 1].  HWC arrays become CHW tensors."""
    arr = np.array(raw, dtype=np.float32)
    t = torch.from_numpy(arr)
    if t.ndim == 3:
        t = t.permute(2, 0, 1)
    return t / 127.5 - 1.0


def denormalize(image: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`normalize`: clamp, scale and round half away from zero to uint8 (HWC)."""
    x = (image.detach().to(torch.float64).clamp(-1.0, 1.0) + 1.0) * 127.5
    x = torch.floor(x + 0.5)  # non-negative, so this is half-away-from-zero
    arr = x.to(torch.uint8).cpu().numpy()
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    return arr


def read_rgb(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def read_mask(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Binary mask (bool HxW); anything above mid-grey counts as shadow."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), Image.NEAREST)
        return np.asarray(im) > 127


def write_rgb(path: str | Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path)


@dataclass
class ImageStore:
    """Decodes and normalizes images, optionally down-scaled to ``size`` (width, height)."""

    size: tuple[int, int] | None = None
    cache: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def load(self, path: Path) -> torch.Tensor:
        key = str(path)
        if self.cache and key in self._cache:
            return self._cache[key]
        t = normalize(read_rgb(path, self.size))
        if self.cache:
            self._cache[key] = t
        return t

    def batch(self, paths: Sequence[Path]) -> torch.Tensor:
        return torch.stack([self.load(p) for p in paths])
