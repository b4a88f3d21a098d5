"""Principal component analysis used to compress semantic embeddings.

Covariance uses the n-1 denominator. When the data rank is below the
requested dimension, the trailing components are an orthonormal
completion with zero explained variance (eigh already returns a full
orthonormal basis, so the completion comes for free).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError


@dataclass
class PcaProjection:
    mean: np.ndarray             # (D,)
    components: np.ndarray       # (D, d), orthonormal columns
    explained_variance: np.ndarray  # (d,), non-increasing

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def output_dim(self) -> int:
        return self.components.shape[1]


def pca_fit(samples, d: int = 64) -> PcaProjection:
    """Top-d principal directions of the sample set.

    Components are variance-sorted descending and sign-canonicalized so
    the largest-magnitude entry of each column is positive.
    """
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"pca_fit needs a 2-D sample matrix, got {data.shape}")
    n, dim = data.shape
    if n < 2:
        raise ContractError(f"pca_fit needs at least 2 samples, got {n}")
    if d < 1 or d > dim:
        raise ContractError(f"pca_fit target dim {d} outside [1, {dim}]")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:d]
    components = eigenvectors[:, order]
    variances = np.maximum(eigenvalues[order], 0.0)
    for col in range(components.shape[1]):
        pivot = np.argmax(np.abs(components[:, col]))
        if components[pivot, col] < 0:
            components[:, col] = -components[:, col]
    return PcaProjection(mean=mean, components=components,
                         explained_variance=variances)


def pca_project(projection: PcaProjection, vector: np.ndarray) -> np.ndarray:
    """Coordinates of ``vector`` in the component basis, mean-centered."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (projection.input_dim,):
        raise ShapeError(
            f"pca_project expects shape ({projection.input_dim},), got {vector.shape}")
    return projection.components.T @ (vector - projection.mean)


def pca_reconstruct(projection: PcaProjection, coords: np.ndarray) -> np.ndarray:
    """Inverse of pca_project on the component span."""
    coords = np.asarray(coords, dtype=np.float64)
    return projection.mean + projection.components @ coords


def reconstruction_error(projection: PcaProjection, samples) -> float:
    """Mean squared reconstruction error over the sample set."""
    data = np.asarray(samples, dtype=np.float64)
    centered = data - projection.mean
    coords = centered @ projection.components
    restored = coords @ projection.components.T
    return float(np.mean((centered - restored) ** 2))
