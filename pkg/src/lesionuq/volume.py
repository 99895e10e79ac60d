"""Dense 3D volume containers and the UVOL binary format.

Volumes are indexed ``[x, y, z]`` in memory and flattened with x varying
fastest, so the flat index of voxel ``(x, y, z)`` is
``x + nx * (y + ny * z)``.  This is numpy's Fortran order.

UVOL layout (little-endian)::

    offset  size  field
    0       4     magic  b"UVOL"
    4       2     version (u16) = 1
    6       1     kind (u8): 0 probability, 1 variance, 2 uncertainty, 3 raw
    7       1     reserved (u8) = 0
    8       12    nx, ny, nz (3 x u32)
    20      4*N   N = nx*ny*nz binary32 values, x fastest
"""
from __future__ import annotations

import enum
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"UVOL"
VERSION = 1
HEADER = struct.Struct("<4sHBB3I")

Dims = tuple[int, int, int]


class UvolFormatError(ValueError):
    """Bytes that do not form a valid UVOL file."""


class UvolTruncationError(UvolFormatError):
    """Payload length disagrees with the header dimensions."""


class Kind(enum.IntEnum):
    PROBABILITY = 0
    VARIANCE = 1
    UNCERTAINTY = 2
    RAW = 3


def _check_dims(dims) -> Dims:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _validate_values(values: np.ndarray, kind: Kind) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError("volume values must be finite (no NaN or Inf)")
    if values.size == 0:
        return
    if kind is Kind.PROBABILITY and (values.min() < 0 or values.max() > 1):
        raise ValueError("probability values must lie in [0, 1]")
    if kind in (Kind.VARIANCE, Kind.UNCERTAINTY) and values.min() < 0:
        raise ValueError(f"{kind.name.lower()} values must be >= 0")


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """An immutable float32 scalar field of shape ``(nx, ny, nz)``."""

    values: np.ndarray
    kind: Kind = Kind.RAW

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32, copy=True)
        if values.ndim != 3:
            raise ValueError(f"values must be 3D, got shape {values.shape}")
        _check_dims(values.shape)
        kind = Kind(self.kind)
        _validate_values(values, kind)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "kind", kind)

    @classmethod
    def from_flat(cls, dims, flat, kind: Kind = Kind.RAW) -> "VoxelGrid":
        dims = _check_dims(dims)
        flat = np.asarray(flat, dtype=np.float32)
        if flat.size != dims[0] * dims[1] * dims[2]:
            raise ValueError(f"{flat.size} values do not fill dims {dims}")
        return cls(flat.reshape(dims, order="F"), kind)

    @property
    def dims(self) -> Dims:
        return self.values.shape

    def flat(self) -> np.ndarray:
        return self.values.ravel(order="F")

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (self.kind == other.kind and self.dims == other.dims
                and self.values.tobytes("F") == other.values.tobytes("F"))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabelMask:
    """An immutable boolean volume of shape ``(nx, ny, nz)``."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 3:
            raise ValueError(f"bits must be 3D, got shape {bits.shape}")
        _check_dims(bits.shape)
        object.__setattr__(self, "bits", _frozen(bits))

    @property
    def dims(self) -> Dims:
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.bits, other.bits)

    __hash__ = None

    def to_grid(self) -> VoxelGrid:
        return VoxelGrid(self.bits.astype(np.float32), Kind.RAW)

    @classmethod
    def from_grid(cls, grid: VoxelGrid) -> "LabelMask":
        return cls(grid.values > 0.5)


@dataclass(frozen=True, eq=False)
class SampleStack:
    """T Monte Carlo prediction samples for one scan.

    ``predictions`` has shape ``(T, nx, ny, nz)``.  ``variances``, when
    present, holds the matching T learned-variance samples.
    """

    predictions: np.ndarray
    variances: np.ndarray | None = None

    def __post_init__(self):
        preds = np.array(self.predictions, dtype=np.float32, copy=True)
        if preds.ndim != 4 or preds.shape[0] < 1:
            raise ValueError("predictions must have shape (T, nx, ny, nz) with T >= 1")
        _check_dims(preds.shape[1:])
        _validate_values(preds, Kind.PROBABILITY)
        object.__setattr__(self, "predictions", _frozen(preds))
        if self.variances is not None:
            var = np.array(self.variances, dtype=np.float32, copy=True)
            if var.shape != preds.shape:
                raise ValueError(
                    f"variances shape {var.shape} != predictions shape {preds.shape}")
            _validate_values(var, Kind.VARIANCE)
            object.__setattr__(self, "variances", _frozen(var))

    @classmethod
    def from_grids(cls, predictions, variances=None) -> "SampleStack":
        preds = [g.values for g in predictions]
        if not preds:
            raise ValueError("a sample stack needs at least one prediction grid")
        if len({p.shape for p in preds}) != 1:
            raise ValueError("all prediction grids must share dims")
        var = None
        if variances is not None:
            var = [g.values for g in variances]
            if len(var) != len(preds):
                raise ValueError("need exactly one variance grid per prediction grid")
            var = np.stack(var)
        return cls(np.stack(preds), var)

    @property
    def T(self) -> int:
        return self.predictions.shape[0]

    @property
    def dims(self) -> Dims:
        return self.predictions.shape[1:]

    @property
    def has_variances(self) -> bool:
        return self.variances is not None

    def sample(self, t: int) -> VoxelGrid:
        return VoxelGrid(self.predictions[t], Kind.PROBABILITY)

    def variance(self, t: int) -> VoxelGrid:
        if self.variances is None:
            raise ValueError("stack carries no variance samples")
        return VoxelGrid(self.variances[t], Kind.VARIANCE)


def sample_mean(samples: np.ndarray) -> np.ndarray:
    """Float64 mean over axis 0, summed in sorted order.

    Sorting along the sample axis fixes the summation order, so the result
    is bit-identical under any permutation of the samples.
    """
    s = np.sort(np.asarray(samples, dtype=np.float64), axis=0)
    return s.sum(axis=0) / s.shape[0]


def mean_prediction(stack: SampleStack) -> VoxelGrid:
    """Voxel-wise mean of the T prediction samples."""
    mean = sample_mean(stack.predictions)
    return VoxelGrid(np.clip(mean, 0.0, 1.0), Kind.PROBABILITY)


def encode_volume(grid: VoxelGrid) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, int(grid.kind), 0, *grid.dims)
    return header + grid.values.astype("<f4").tobytes(order="F")


def decode_volume(data: bytes) -> VoxelGrid:
    if len(data) < HEADER.size:
        raise UvolTruncationError(f"{len(data)} bytes is shorter than the UVOL header")
    magic, version, kind, reserved, nx, ny, nz = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise UvolFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UvolFormatError(f"unsupported UVOL version {version}")
    if kind not in Kind._value2member_map_:
        raise UvolFormatError(f"unknown kind code {kind}")
    if reserved != 0:
        raise UvolFormatError(f"reserved byte must be 0, got {reserved}")
    if min(nx, ny, nz) < 1:
        raise UvolFormatError(f"dims must be positive, got {(nx, ny, nz)}")
    n = nx * ny * nz
    payload = memoryview(data)[HEADER.size:]
    if len(payload) != 4 * n:
        raise UvolTruncationError(
            f"header declares {n} voxels ({4 * n} bytes), payload has {len(payload)} bytes")
    flat = np.frombuffer(payload, dtype="<f4")
    try:
        return VoxelGrid.from_flat((nx, ny, nz), flat, Kind(kind))
    except ValueError as exc:
        raise UvolFormatError(str(exc)) from exc


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def save_volume(grid: VoxelGrid, path) -> None:
    atomic_write_bytes(path, encode_volume(grid))


def load_volume(path) -> VoxelGrid:
    path = Path(path)
    data = path.read_bytes()
    try:
        return decode_volume(data)
    except UvolFormatError as exc:
        raise type(exc)(f"{path}: {exc}") from exc
