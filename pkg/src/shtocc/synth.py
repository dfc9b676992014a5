"""Synthetic long-tail voxel scenes.

Head classes occupy large contiguous regions (a ground slab for class 1 and
axis-aligned boxes for the rest); tail classes are small 6-connected blobs.
Features are a per-class unit embedding plus Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError
from .voxel_core import DenseFeatureGrid, DenseLabelGrid, GridDims

DEFAULT_FREQUENCIES = (0.40, 0.25, 0.15, 0.10, 0.09, 0.005, 0.005)

_NEIGHBOURS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


@dataclass(frozen=True)
class SceneConfig:
    dims: GridDims = field(default_factory=lambda: GridDims(32, 32, 8))
    num_classes: int = 8
    frequencies: tuple[float, ...] = DEFAULT_FREQUENCIES  # semantic classes 1..C-1
    empty_fraction: float = 0.65
    blob_size: tuple[int, int] = (3, 7)
    head_style: str = "ground"  # "ground" slab for class 1, or "box"
    blob_threshold: float = 0.01  # classes rarer than this are grown as blobs
    feature_channels: int = 8
    noise: float = 0.2
    seed: int = 0
    embed_seed: int = 1234

    def __post_init__(self):
        freq = np.asarray(self.frequencies, dtype=np.float64)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if freq.shape != (self.num_classes - 1,):
            raise ConfigError(f"frequencies needs {self.num_classes - 1} values (one per semantic class)")
        if (freq < 0).any() or abs(freq.sum() - 1.0) > 1e-6:
            raise ConfigError("frequencies must be non-negative and sum to 1")
        if not 0.0 <= self.empty_fraction < 1.0:
            raise ConfigError("empty_fraction must lie in [0, 1)")
        lo, hi = self.blob_size
        if lo < 1 or hi < lo:
            raise ConfigError("blob_size must satisfy 1 <= min <= max")
        if self.head_style not in ("ground", "box"):
            raise ConfigError("head_style must be 'ground' or 'box'")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.feature_channels < 1:
            raise ConfigError("feature_channels must be >= 1")
        object.__setattr__(self, "frequencies", tuple(float(f) for f in freq))
        object.__setattr__(self, "blob_size", (int(lo), int(hi)))

    def with_seed(self, seed: int) -> "SceneConfig":
        return replace(self, seed=int(seed))

    def tail_classes(self) -> list[int]:
        return [c for c, f in enumerate(self.frequencies, start=1) if 0 < f < self.blob_threshold]

    def target_counts(self) -> np.ndarray:
        """Voxel count per class (index 0 = empty) implied by the config."""
        n_ne = int(round((1.0 - self.empty_fraction) * self.dims.size))
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for c, f in enumerate(self.frequencies, start=1):
            counts[c] = int(round(f * n_ne))
        counts[0] = self.dims.size - counts.sum()
        return counts


def class_embeddings(cfg: SceneConfig) -> np.ndarray:
    """Unit-norm embedding per semantic class; the empty class maps to zero."""
    rng = np.random.default_rng(cfg.embed_seed)
    emb = rng.normal(size=(cfg.num_classes, cfg.feature_channels))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    emb[0] = 0.0
    return emb


def _grow_blob(vol, start, size, rng) -> list | None:
    d, w, h = vol.shape
    blob = [tuple(start)]
    members = {tuple(start)}
    frontier = []

    def push(p):
        for dz, dy, dx in _NEIGHBOURS:
            q = (p[0] + dz, p[1] + dy, p[2] + dx)
            if 0 <= q[0] < d and 0 <= q[1] < w and 0 <= q[2] < h and vol[q] == 0 and q not in members:
                frontier.append(q)

    push(blob[0])
    while len(blob) < size:
        frontier = [q for q in frontier if q not in members]
        if not frontier:
            return None
        q = frontier[int(rng.integers(len(frontier)))]
        blob.append(q)
        members.add(q)
        push(q)
    return blob


def generate_scene(cfg: SceneConfig, return_layout: bool = False):
    """Build one (labels, features) pair; deterministic in ``cfg.seed``.

    With ``return_layout`` also returns the list of tail blobs as
    ``(class, [(z, y, x), ...])`` pairs.
    """
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.dims
    targets = cfg.target_counts()
    tails = cfg.tail_classes()
    lo, hi = cfg.blob_size
    for c in tails:
        if targets[c] < lo:
            raise ConfigError(
                f"class {c}: target of {targets[c]} voxels is below the minimum blob size {lo}; "
                "raise its frequency or lower blob_size"
            )
    vol = np.zeros((dims.d, dims.w, dims.h), dtype=np.int64)
    flat = vol.reshape(-1)
    blobs = []

    ground_top = 0
    if cfg.head_style == "ground" and 1 not in tails and targets[1] > 0:
        flat[: targets[1]] = 1
        ground_top = int(targets[1] // (dims.h * dims.w))

    for c in tails:
        remaining = int(targets[c])
        attempts = 0
        while remaining >= lo:
            attempts += 1
            if attempts > 10000:
                raise ConfigError(f"class {c}: no room left to place tail blobs")
            size = min(int(rng.integers(lo, hi + 1)), remaining)
            if 0 < remaining - size < lo:
                # avoid leaving a remainder too small for another blob
                if remaining <= hi:
                    size = remaining
                elif remaining - lo >= lo:
                    size = min(remaining - lo, hi)
            free = np.flatnonzero(flat[ground_top * dims.h * dims.w:] == 0) + ground_top * dims.h * dims.w
            if free.size == 0:
                raise ConfigError(f"class {c}: grid is full")
            start = np.unravel_index(free[int(rng.integers(free.size))], vol.shape)
            blob = _grow_blob(vol, start, size, rng)
            if blob is None:
                continue
            for p in blob:
                vol[p] = c
            blobs.append((c, blob))
            remaining -= size

    order = [c for c in range(1, cfg.num_classes) if c not in tails and not (cfg.head_style == "ground" and c == 1)]
    order.sort(key=lambda c: -targets[c])
    for c in order:
        remaining = int(targets[c])
        attempts = 0
        while remaining > 0:
            attempts += 1
            if attempts > 10000:
                raise ConfigError(f"class {c}: could not place {remaining} more voxels in boxes")
            sx = int(rng.integers(2, min(8, dims.h) + 1)) if dims.h > 1 else 1
            sy = int(rng.integers(2, min(8, dims.w) + 1)) if dims.w > 1 else 1
            sz = int(rng.integers(1, dims.d + 1))
            x0 = int(rng.integers(0, dims.h - sx + 1))
            y0 = int(rng.integers(0, dims.w - sy + 1))
            z0 = int(rng.integers(0, dims.d - sz + 1))
            box = vol[z0:z0 + sz, y0:y0 + sy, x0:x0 + sx]
            free = np.flatnonzero(box.reshape(-1) == 0)[:remaining]
            if free.size == 0:
                continue
            sub = box.reshape(-1).copy()
            sub[free] = c
            vol[z0:z0 + sz, y0:y0 + sy, x0:x0 + sx] = sub.reshape(box.shape)
            remaining -= free.size

    labels = DenseLabelGrid(dims, vol.reshape(-1), cfg.num_classes)
    emb = class_embeddings(cfg)
    feats = emb[labels.labels] + cfg.noise * rng.normal(size=(dims.size, cfg.feature_channels))
    out = (labels, DenseFeatureGrid(dims, feats))
    return out + (blobs,) if return_layout else out


def generate_scenes(cfg: SceneConfig, n: int) -> list[tuple[DenseLabelGrid, DenseFeatureGrid]]:
    """``n`` scenes with per-scene seeds ``cfg.seed + i``."""
    return [generate_scene(cfg.with_seed(cfg.seed + i)) for i in range(n)]


def class_frequencies(grid: DenseLabelGrid) -> tuple[np.ndarray, float]:
    """Per-class fraction of non-empty voxels (entry 0 is 0) and the empty fraction."""
    counts = np.bincount(grid.labels, minlength=grid.num_classes).astype(np.float64)
    nonempty = counts[1:].sum()
    if nonempty == 0:
        raise DataError("grid has no non-empty voxel")
    freq = counts / nonempty
    freq[0] = 0.0
    return freq, float(counts[0] / grid.dims.size)
