"""Dense and sparse (COO) voxel containers.

All grids are stored flat in row-major order with x fastest, then y, then z:
``linear = x + h * (y + w * z)``. Class id 0 is the empty class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, StructuralError


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GridDims:
    h: int
    w: int
    d: int

    def __post_init__(self):
        for name in ("h", "w", "d"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise StructuralError(f"grid dimension {name}={v} must be a positive integer")
            object.__setattr__(self, name, int(v))

    @property
    def size(self) -> int:
        return self.h * self.w * self.d

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.d)

    def linear_index(self, coords) -> np.ndarray:
        """Row-major linear index of each (x, y, z) row; raises on out-of-bounds."""
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        bad = (c < 0).any(axis=1) | (c[:, 0] >= self.h) | (c[:, 1] >= self.w) | (c[:, 2] >= self.d)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise BoundsError(f"coordinate #{i} {tuple(int(v) for v in c[i])} outside grid {self.as_tuple()}")
        return c[:, 0] + self.h * (c[:, 1] + self.w * c[:, 2])

    def coords_of(self, linear) -> np.ndarray:
        lin = np.asarray(linear, dtype=np.int64).reshape(-1)
        x = lin % self.h
        y = (lin // self.h) % self.w
        z = lin // (self.h * self.w)
        return np.stack([x, y, z], axis=1)


@dataclass(frozen=True)
class DenseLabelGrid:
    dims: GridDims
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != self.dims.size:
            raise StructuralError(f"label grid needs {self.dims.size} entries, got shape {labels.shape}")
        if self.num_classes < 1:
            raise StructuralError("num_classes must be >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise StructuralError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))

    def nonempty_count(self) -> int:
        return int(np.count_nonzero(self.labels))


@dataclass(frozen=True)
class DenseFeatureGrid:
    dims: GridDims
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != self.dims.size or values.shape[1] < 1:
            raise StructuralError(
                f"feature grid needs shape ({self.dims.size}, C2>=1), got {values.shape}"
            )
        if not np.isfinite(values).all():
            raise StructuralError("feature grid contains non-finite values")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def channels(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class SparseVoxelSet:
    """COO set of (coordinate, feature) pairs with unique in-bounds coordinates."""

    dims: GridDims
    coords: np.ndarray
    features: np.ndarray
    channels: int = field(default=-1)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(self.features, dtype=np.float64)
        channels = self.channels
        if features.size == 0 and features.ndim < 2:
            if channels < 1:
                raise StructuralError("empty sparse set needs an explicit channel count")
            features = features.reshape(0, channels)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise StructuralError(
                f"{coords.shape[0]} coordinates but feature matrix of shape {features.shape}"
            )
        if channels >= 1 and features.shape[1] != channels:
            raise StructuralError(f"channel count {channels} != feature width {features.shape[1]}")
        lin = self.dims.linear_index(coords)
        if np.unique(lin).size != lin.size:
            raise StructuralError("duplicate coordinates in sparse voxel set")
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "channels", int(features.shape[1]))

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    def linear_indices(self) -> np.ndarray:
        return self.dims.linear_index(self.coords)


@dataclass(frozen=True)
class SelectionResult:
    """Selected voxel coordinates with scores, a head/tail tag and repetition counts."""

    coords: np.ndarray
    scores: np.ndarray
    source: tuple[str, ...]
    multiplicity: np.ndarray
    indices: np.ndarray | None = None  # row indices into the sparse set, when known

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        n = coords.shape[0]
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        mult = np.asarray(self.multiplicity, dtype=np.int64).reshape(-1)
        source = tuple(self.source)
        if scores.shape[0] != n or mult.shape[0] != n or len(source) != n:
            raise StructuralError("selection fields must be parallel sequences")
        if n and mult.min() < 1:
            raise StructuralError("multiplicity must be positive")
        if any(s not in ("head", "tail") for s in source):
            raise StructuralError("source must be 'head' or 'tail'")
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "scores", _frozen(scores))
        object.__setattr__(self, "multiplicity", _frozen(mult))
        object.__setattr__(self, "source", source)
        if self.indices is not None:
            object.__setattr__(self, "indices", _frozen(np.asarray(self.indices, dtype=np.int64)))

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    def _mask(self, which: str) -> np.ndarray:
        return np.array([s == which for s in self.source], dtype=bool)

    def head_count(self) -> int:
        return int(self._mask("head").sum())

    def tail_total(self) -> int:
        return int(self.multiplicity[self._mask("tail")].sum())

    def unique_count(self, dims: GridDims) -> int:
        if len(self) == 0:
            return 0
        return int(np.unique(dims.linear_index(self.coords)).size)

    @staticmethod
    def concat(a: "SelectionResult", b: "SelectionResult") -> "SelectionResult":
        idx = None
        if a.indices is not None and b.indices is not None:
            idx = np.concatenate([a.indices, b.indices])
        return SelectionResult(
            coords=np.concatenate([a.coords, b.coords]),
            scores=np.concatenate([a.scores, b.scores]),
            source=a.source + b.source,
            multiplicity=np.concatenate([a.multiplicity, b.multiplicity]),
            indices=idx,
        )


def empty_selection() -> SelectionResult:
    return SelectionResult(np.zeros((0, 3), np.int64), np.zeros(0), (), np.zeros(0, np.int64), np.zeros(0, np.int64))


def sparsify(features: DenseFeatureGrid, occupancy: DenseLabelGrid) -> SparseVoxelSet:
    """Gather the non-empty voxels of ``features`` into COO form, in row-major order."""
    if features.dims != occupancy.dims:
        raise StructuralError(f"feature dims {features.dims} != label dims {occupancy.dims}")
    lin = np.flatnonzero(occupancy.labels != 0)
    return SparseVoxelSet(
        features.dims,
        features.dims.coords_of(lin),
        features.values[lin],
        channels=features.channels,
    )


def gather_features(grid: DenseFeatureGrid, coords) -> np.ndarray:
    """Rows of ``grid`` at ``coords``; duplicate coordinates give duplicate rows."""
    lin = grid.dims.linear_index(coords)
    return grid.values[lin].copy()


def gather_labels(grid: DenseLabelGrid, coords) -> np.ndarray:
    lin = grid.dims.linear_index(coords)
    return grid.labels[lin].copy()


def voxel_completion(encoded: DenseFeatureGrid, refined: SparseVoxelSet) -> DenseFeatureGrid:
    """Write refined sparse features back into a copy of the dense encoded grid."""
    if refined.dims != encoded.dims:
        raise StructuralError(f"refined dims {refined.dims} != encoded dims {encoded.dims}")
    if refined.channels != encoded.channels:
        raise StructuralError(f"refined has {refined.channels} channels, encoded has {encoded.channels}")
    out = np.array(encoded.values, copy=True)
    if len(refined):
        out[refined.linear_indices()] = refined.features
    return DenseFeatureGrid(encoded.dims, out)
