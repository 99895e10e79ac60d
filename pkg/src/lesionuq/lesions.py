"""Candidate and ground-truth lesion extraction with 18-connectivity.

Two voxels are 18-adjacent when their offset has Chebyshev distance 1 and
at most two nonzero coordinates: the 6 face and 12 edge neighbours, but
not the 8 corner neighbours.
"""
from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .volume import Dims, Kind, LabelMask, VoxelGrid

OFFSETS_18 = np.array(
    [d for d in itertools.product((-1, 0, 1), repeat=3)
     if any(d) and sum(c != 0 for c in d) <= 2],
    dtype=np.int64,
)
# One of each +/- pair, enough to enumerate every adjacency once.
_HALF_OFFSETS_18 = np.array(
    [d for d in OFFSETS_18 if next(c for c in d if c != 0) > 0], dtype=np.int64)

MIN_LESION_SIZE = 3
BINS = ("small", "medium", "large")


def size_bin(size: int) -> str:
    """small 3-10, medium 11-50, large 51+, subthreshold below 3."""
    if size < MIN_LESION_SIZE:
        return "subthreshold"
    if size <= 10:
        return "small"
    if size <= 50:
        return "medium"
    return "large"


def flat_index(coords: np.ndarray, dims: Dims) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return coords[:, 0] + dims[0] * (coords[:, 1] + dims[1] * coords[:, 2])


def unflatten(idx: np.ndarray, dims: Dims) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    x = idx % dims[0]
    y = (idx // dims[0]) % dims[1]
    z = idx // (dims[0] * dims[1])
    return np.stack([x, y, z], axis=1)


@dataclass(frozen=True, eq=False)
class Lesion:
    id: int
    voxels: np.ndarray  # (n, 3) int coordinates, sorted by flat index

    def __post_init__(self):
        vox = np.array(self.voxels, dtype=np.int64, copy=True).reshape(-1, 3)
        if len(vox) == 0:
            raise ValueError("a lesion needs at least one voxel")
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)

    @property
    def size(self) -> int:
        return len(self.voxels)

    @property
    def bin(self) -> str:
        return size_bin(self.size)

    def __eq__(self, other):
        if not isinstance(other, Lesion):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.voxels, other.voxels)

    __hash__ = None


@dataclass(frozen=True)
class LesionSet:
    lesions: list[Lesion]
    dims: Dims
    _labels: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.lesions)

    def __iter__(self):
        return iter(self.lesions)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([les.size for les in self.lesions], dtype=np.int64)

    def label_volume(self) -> np.ndarray:
        """int64 volume holding each voxel's lesion id, -1 for background."""
        if self._labels is not None:
            return self._labels
        labels = np.full(self.dims, -1, dtype=np.int64)
        for les in self.lesions:
            labels[tuple(les.voxels.T)] = les.id
        labels.flags.writeable = False
        object.__setattr__(self, "_labels", labels)
        return labels

    def mask(self) -> np.ndarray:
        return self.label_volume() >= 0

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "lesions": [
                {"id": les.id, "size": les.size, "bin": les.bin,
                 "voxels": les.voxels.tolist()}
                for les in self.lesions
            ],
        }

    @classmethod
    def from_json(cls, obj) -> "LesionSet":
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        dims = tuple(int(d) for d in obj["dims"])
        lesions = [Lesion(int(d["id"]), np.array(d["voxels"], dtype=np.int64))
                   for d in obj["lesions"]]
        for les, d in zip(lesions, obj["lesions"]):
            if les.size != d.get("size", les.size):
                raise ValueError(f"lesion {les.id}: size field disagrees with voxel list")
        return cls(lesions, dims)


def binarize(prob: VoxelGrid, theta: float) -> LabelMask:
    """Indicator ``prob >= theta``."""
    if prob.kind is not Kind.PROBABILITY:
        raise ValueError(f"binarize expects a probability grid, got {prob.kind.name}")
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    return LabelMask(prob.values >= np.float32(theta))


@functools.lru_cache(maxsize=64)
def _half_steps(px: int, py: int) -> np.ndarray:
    return _HALF_OFFSETS_18 @ np.array([1, px, px * py], dtype=np.int64)


def _adjacent_pairs(bits: np.ndarray):
    """Pairs (i, j) of 18-adjacent set voxels, as ranks in flat order.

    The volume is padded by one empty voxel on every side, so each of the
    nine half-offsets becomes a constant flat step and no neighbour lookup
    can leave the array or wrap around an edge.  Padding keeps the set
    voxels in the same flat order, so their padded ranks are their ranks.
    """
    nx, ny, nz = bits.shape
    padded = np.zeros((nx + 2, ny + 2, nz + 2), dtype=bool, order="F")
    padded[1:-1, 1:-1, 1:-1] = bits
    pflat = padded.ravel(order="K")
    idx = np.flatnonzero(pflat)
    nb = idx[:, None] + _half_steps(nx + 2, ny + 2)
    rows, cols = np.nonzero(pflat[nb])
    return rows, np.searchsorted(idx, nb[rows, cols])


def _find_roots(n: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Union-find over n nodes and edges (u, v), vectorised.

    Each round hooks every root that has a live edge onto a smaller root
    across one of its edges, then compresses paths by pointer jumping.
    Roots only ever point to smaller indices, so no cycles form, and a
    component's smallest node is never hooked, so it ends up the root.
    """
    parent = np.arange(n, dtype=np.int64)
    while len(u):
        ru, rv = parent[u], parent[v]
        live = ru != rv
        if not live.any():
            break
        ru, rv = ru[live], rv[live]
        # any smaller root will do; duplicate writes pick one of them
        parent[np.maximum(ru, rv)] = np.minimum(ru, rv)
        while True:
            grand = parent[parent]
            if (grand == parent).all():
                break
            parent = grand
        u, v = u[live], v[live]
    return parent


def label_components(bits: np.ndarray) -> tuple[np.ndarray, int]:
    """Label the 18-connected components of a boolean volume.

    Returns an int64 label volume (-1 for background) and the component
    count.  Ids follow the order of each component's smallest flat index.
    """
    bits = np.asarray(bits, dtype=bool)
    dims = bits.shape
    flat_bits = bits.ravel(order="F")
    idx = np.flatnonzero(flat_bits)
    labels_flat = np.full(flat_bits.size, -1, dtype=np.int64)
    if idx.size == 0:
        return labels_flat.reshape(dims, order="F"), 0
    roots = _find_roots(idx.size, *_adjacent_pairs(bits))
    # Every root is its component's smallest node, so numbering roots in
    # node order numbers components by smallest flat index.
    is_root = roots == np.arange(idx.size)
    labels_flat[idx] = (np.cumsum(is_root, dtype=np.int64) - 1)[roots]
    return labels_flat.reshape(dims, order="F"), int(np.count_nonzero(is_root))


def _lesions_from_labels(labels: np.ndarray, count: int) -> list[Lesion]:
    dims = labels.shape
    flat = labels.ravel(order="F")
    idx = np.flatnonzero(flat >= 0)
    ids = flat[idx]
    order = np.argsort(ids, kind="stable")
    idx, ids = idx[order], ids[order]
    bounds = np.searchsorted(ids, np.arange(count + 1))
    coords = unflatten(idx, dims)
    return [Lesion(k, coords[bounds[k]:bounds[k + 1]]) for k in range(count)]


def connected_components_18(mask: LabelMask) -> LesionSet:
    labels, count = label_components(mask.bits)
    labels.flags.writeable = False
    return LesionSet(_lesions_from_labels(labels, count), mask.dims, labels)


def prune_ground_truth(gt: LesionSet, min_size: int = MIN_LESION_SIZE) -> LesionSet:
    """Drop lesions smaller than ``min_size`` voxels and renumber from 0."""
    kept = [les for les in gt.lesions if les.size >= min_size]
    return LesionSet([Lesion(k, les.voxels) for k, les in enumerate(kept)], gt.dims)


@functools.lru_cache(maxsize=64)
def _all_steps(px: int, py: int) -> np.ndarray:
    return OFFSETS_18 @ np.array([1, px, px * py], dtype=np.int64)


def dilate_mask(bits: np.ndarray) -> np.ndarray:
    """Union of ``bits`` with every in-bounds 18-neighbour of a set voxel."""
    bits = np.asarray(bits, dtype=bool)
    nx, ny, nz = bits.shape
    padded = np.zeros((nx + 2, ny + 2, nz + 2), dtype=bool, order="F")
    padded[1:-1, 1:-1, 1:-1] = bits
    pflat = padded.ravel(order="K")
    idx = np.flatnonzero(pflat)
    pflat[(idx[:, None] + _all_steps(nx + 2, ny + 2)).ravel()] = True
    return np.ascontiguousarray(padded[1:-1, 1:-1, 1:-1])


def dilate_18(lesion: Lesion, dims: Dims) -> np.ndarray:
    """Coordinates of the lesion plus its in-bounds 18-neighbourhood.

    Returned as an ``(n, 3)`` array sorted by flat index.
    """
    vox = lesion.voxels
    if (vox < 0).any() or (vox >= np.asarray(dims)).any():
        raise ValueError("lesion voxels fall outside dims")
    cand = (vox[:, None, :] + np.vstack([np.zeros((1, 3), np.int64), OFFSETS_18])[None]).reshape(-1, 3)
    inside = np.all((cand >= 0) & (cand < np.asarray(dims)), axis=1)
    flat = np.unique(flat_index(cand[inside], dims))
    return unflatten(flat, dims)


def lesion_count_by_bin(lesions: LesionSet) -> dict[str, int]:
    counts = {b: 0 for b in (*BINS, "subthreshold")}
    for les in lesions:
        counts[les.bin] += 1
    return counts
