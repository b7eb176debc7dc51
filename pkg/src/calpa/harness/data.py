"""Synthetic cover/stego dataset for desk-scale steganalysis.

Covers are smoothed noise textures; stegos add ±1 changes to a random
fraction of pixels, a stand-in for spatial-domain embedding at a given
change rate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from calpa.harness.pgm import read_pgm, write_pgm

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 2000
    size: int = 64
    payload: float = 0.4
    smoothing: float = 2.5
    seed: int = 0
    split: tuple[int, int, int] = (1400, 200, 400)
    levels: tuple[int, int] = (16, 239)

    def validate(self) -> None:
        if self.size < 32:
            raise ValueError(f"image size must be >= 32, got {self.size}")
        if not 0 <= self.payload <= 1:
            raise ValueError(f"payload must lie in [0, 1], got {self.payload}")
        if sum(self.split) != self.count or min(self.split) < 0:
            raise ValueError(f"split {self.split} does not partition {self.count} pairs")
        if self.smoothing < 0:
            raise ValueError("smoothing must be non-negative")


def make_cover(rng: np.random.Generator, size: int, smoothing: float, levels=(16, 239)) -> np.ndarray:
    """Blurred uniform noise, contrast-stretched to ``levels`` and quantized."""
    field_ = gaussian_filter(rng.random((size, size)), smoothing, mode="wrap") if smoothing else rng.random((size, size))
    lo, hi = field_.min(), field_.max()
    scaled = (field_ - lo) / (hi - lo) if hi > lo else np.zeros_like(field_)
    return np.round(levels[0] + scaled * (levels[1] - levels[0])).astype(np.uint8)


def embed(cover: np.ndarray, payload: float, rng: np.random.Generator) -> np.ndarray:
    """Change each pixel by ±1 with probability ``payload``, clamping to [0, 255]."""
    changed = rng.random(cover.shape) < payload
    sign = np.where(rng.random(cover.shape) < 0.5, -1, 1)
    stego = cover.astype(np.int16) + changed * sign
    return np.clip(stego, 0, 255).astype(np.uint8)


def make_pair(spec: DatasetSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, index])
    cover = make_cover(rng, spec.size, spec.smoothing, spec.levels)
    return cover, embed(cover, spec.payload, rng)


def split_indices(spec: DatasetSpec) -> dict[str, list[int]]:
    order = np.random.default_rng([spec.seed, 2**31 - 1]).permutation(spec.count)
    a, b, _ = spec.split
    parts = (order[:a], order[a:a + b], order[a + b:])
    return {name: sorted(int(i) for i in part) for name, part in zip(SPLITS, parts)}


def stem(index: int) -> str:
    return f"{index:05d}"


def generate_dataset(spec: DatasetSpec, root) -> Path:
    """Write ``cover/`` and ``stego/`` PGM files plus ``manifest.json``."""
    spec.validate()
    root = Path(root)
    (root / "cover").mkdir(parents=True, exist_ok=True)
    (root / "stego").mkdir(parents=True, exist_ok=True)
    for i in range(spec.count):
        cover, stego = make_pair(spec, i)
        write_pgm(root / "cover" / f"{stem(i)}.pgm", cover)
        write_pgm(root / "stego" / f"{stem(i)}.pgm", stego)
    splits = split_indices(spec)
    manifest = {
        "format_version": 1,
        "spec": asdict(spec),
        "seed": spec.seed,
        "splits": {name: [stem(i) for i in idx] for name, idx in splits.items()},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return root


@dataclass
class Dataset:
    """Paired images in memory: ``covers[i]`` and ``stegos[i]`` share stem ``i``."""

    spec: DatasetSpec
    covers: np.ndarray
    stegos: np.ndarray
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def pairs(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[split]
        return self.covers[idx], self.stegos[idx]

    def labeled(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Images and labels (cover 0, stego 1), covers first."""
        c, s = self.pairs(split)
        images = np.concatenate([c, s])
        labels = np.concatenate([np.zeros(len(c), np.int64), np.ones(len(s), np.int64)])
        return images, labels


def spec_from_dict(data: dict) -> DatasetSpec:
    data = dict(data)
    for key in ("split", "levels"):
        if key in data:
            data[key] = tuple(data[key])
    return DatasetSpec(**data)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    spec = spec_from_dict(manifest["spec"])
    covers = np.stack([read_pgm(root / "cover" / f"{stem(i)}.pgm") for i in range(spec.count)])
    stegos = np.stack([read_pgm(root / "stego" / f"{stem(i)}.pgm") for i in range(spec.count)])
    splits = {name: np.array([int(s) for s in stems], dtype=np.int64)
              for name, stems in manifest["splits"].items()}
    return Dataset(spec, covers, stegos, splits)


def in_memory_dataset(spec: DatasetSpec) -> Dataset:
    """Same content as :func:`generate_dataset` without touching the disk."""
    spec.validate()
    pairs = [make_pair(spec, i) for i in range(spec.count)]
    covers = np.stack([p[0] for p in pairs]) if pairs else np.zeros((0, spec.size, spec.size), np.uint8)
    stegos = np.stack([p[1] for p in pairs]) if pairs else covers.copy()
    splits = {k: np.array(v, dtype=np.int64) for k, v in split_indices(spec).items()}
    return Dataset(spec, covers, stegos, splits)


def to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Map uint8 images ``(N, H, W)`` to centered network inputs ``(N, 1, H, W)``."""
    return ((images.astype(dtype) - 127.5) / 64.0)[:, None]
