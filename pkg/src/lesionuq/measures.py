"""Voxel-wise Monte Carlo dropout uncertainty measures.

All measures treat the network output as a single sigmoid channel, so each
voxel carries a two-class distribution ``(1 - p, p)``.  Logs are natural.

The ``*_kernel`` functions take float arrays whose first axis indexes the T
samples and return float64 maps; the stack-level functions wrap them and
return float32 :class:`~lesionuq.volume.VoxelGrid` objects.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Kind, SampleStack, VoxelGrid, sample_mean

MEASURES = ("entropy", "mi", "samplevar", "predvar")

# MI may come out a hair below zero from cancellation.
MI_CLAMP_TOL = 1e-9


class MissingInputError(ValueError):
    """A measure needs data the sample stack does not carry."""


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def binary_entropy(p) -> np.ndarray:
    """Entropy of ``(1 - p, p)`` in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    return -(_xlogx(p) + _xlogx(1.0 - p))


def entropy_kernel(samples) -> np.ndarray:
    return binary_entropy(sample_mean(samples))


def mutual_information_kernel(samples) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    mi = binary_entropy(sample_mean(samples)) - sample_mean(binary_entropy(samples))
    return np.where((mi < 0) & (mi >= -MI_CLAMP_TOL), 0.0, mi)


def sample_variance_kernel(samples) -> np.ndarray:
    """Population variance (divide by T), computed in two passes."""
    samples = np.asarray(samples, dtype=np.float64)
    dev = samples - sample_mean(samples)
    return sample_mean(dev * dev)


def predictive_variance_kernel(variances) -> np.ndarray:
    return sample_mean(variances)


def _as_uncertainty(values: np.ndarray) -> VoxelGrid:
    return VoxelGrid(values, Kind.UNCERTAINTY)


def predictive_entropy(stack: SampleStack) -> VoxelGrid:
    """Entropy of the mean predictive distribution (total uncertainty)."""
    return _as_uncertainty(entropy_kernel(stack.predictions))


def mutual_information(stack: SampleStack) -> VoxelGrid:
    """Entropy of the mean minus mean entropy of the samples (model uncertainty)."""
    return _as_uncertainty(mutual_information_kernel(stack.predictions))


def mc_sample_variance(stack: SampleStack) -> VoxelGrid:
    return _as_uncertainty(sample_variance_kernel(stack.predictions))


def predictive_variance(stack: SampleStack) -> VoxelGrid:
    """Mean of the T learned noise-variance samples.

    Raises:
        MissingInputError: if the stack has no variance samples.
    """
    if stack.variances is None:
        raise MissingInputError("predictive variance needs variance samples, stack has none")
    return _as_uncertainty(predictive_variance_kernel(stack.variances))


_DISPATCH = {
    "entropy": predictive_entropy,
    "mi": mutual_information,
    "samplevar": mc_sample_variance,
    "predvar": predictive_variance,
}


def compute_measure(stack: SampleStack, measure: str) -> VoxelGrid:
    try:
        fn = _DISPATCH[measure]
    except KeyError:
        raise ValueError(f"unknown measure {measure!r}; choose from {MEASURES}") from None
    return fn(stack)


@dataclass(frozen=True)
class UncertaintyMaps:
    entropy: VoxelGrid
    mutual_info: VoxelGrid
    sample_var: VoxelGrid
    pred_var: VoxelGrid | None = None

    def as_dict(self) -> dict[str, VoxelGrid]:
        out = {"entropy": self.entropy, "mi": self.mutual_info, "samplevar": self.sample_var}
        if self.pred_var is not None:
            out["predvar"] = self.pred_var
        return out


def uncertainty_maps(stack: SampleStack) -> UncertaintyMaps:
    """All measures the stack supports; ``pred_var`` only with variance samples."""
    return UncertaintyMaps(
        entropy=predictive_entropy(stack),
        mutual_info=mutual_information(stack),
        sample_var=mc_sample_variance(stack),
        pred_var=predictive_variance(stack) if stack.has_variances else None,
    )
