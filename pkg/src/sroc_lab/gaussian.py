"""Multivariate Gaussian fitting with Ledoit-Wolf shrinkage and Mahalanobis
distances via cached Cholesky factors.

Covariance uses the biased (divide-by-N) normalization, which is what the
shrinkage intensity formula assumes. All accumulation is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InsufficientDataError, NonFiniteError, NotSPDError

_SYMMETRY_TOL = 1e-8
_JITTER_SCALE = 1e-6


@dataclass(frozen=True)
class GaussianModel:
    """Fitted Gaussian: mean, shrunk covariance, its lower Cholesky factor,
    and the shrinkage intensity used."""

    mean: np.ndarray
    covariance: np.ndarray
    cholesky_factor: np.ndarray
    shrinkage_alpha: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def empirical_mean_cov(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column mean and biased (1/N) covariance of the rows of X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InsufficientDataError(
            f"need an N x D matrix with N >= 2, got shape {X.shape}"
        )
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / X.shape[0]
    return mean, cov


def _shrinkage_intensity(centered: np.ndarray, cov: np.ndarray) -> float:
    """Optimal intensity toward the scaled-identity target m*I, estimated from
    the data (Ledoit-Wolf), clipped to [0, 1]."""
    n, d = centered.shape
    m = np.trace(cov) / d
    # delta^2: normalized squared Frobenius distance from the target
    delta2 = np.sum((cov - m * np.eye(d)) ** 2) / d
    if delta2 <= 0.0:
        return 0.0
    # b^2: dispersion of the per-sample outer products around the estimate
    sq_norms = np.einsum("ij,ij->i", centered, centered)
    beta2 = (np.sum(sq_norms**2) / n - np.sum(cov**2)) / (n * d)
    beta2 = min(max(beta2, 0.0), delta2)
    return float(beta2 / delta2)


def ledoit_wolf(X: np.ndarray) -> GaussianModel:
    """Fit mean and shrunk covariance (1-a)*S + a*m*I with the Ledoit-Wolf
    intensity a; Cholesky factor cached for distance queries.

    If the shrunk matrix still fails to factor, one jitter of 1e-6*m*I is
    added; persisting failure (e.g. identical rows giving S = 0) raises.
    """
    X = np.asarray(X, dtype=np.float64)
    if not np.isfinite(X).all():
        raise NonFiniteError("ledoit_wolf: input contains non-finite values")
    mean, cov = empirical_mean_cov(X)
    d = cov.shape[0]
    alpha = _shrinkage_intensity(X - mean, cov)
    m = np.trace(cov) / d
    shrunk = (1.0 - alpha) * cov + alpha * m * np.eye(d)
    shrunk = (shrunk + shrunk.T) / 2.0  # keep symmetric to rounding

    try:
        chol = np.linalg.cholesky(shrunk)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(shrunk + _JITTER_SCALE * m * np.eye(d))
        except np.linalg.LinAlgError:
            raise NotSPDError(
                "shrunk covariance is not positive-definite even after jitter "
                "(degenerate input, e.g. all rows identical)"
            )
    return GaussianModel(
        mean=mean, covariance=shrunk, cholesky_factor=chol, shrinkage_alpha=alpha
    )


def mahalanobis_distance(model: GaussianModel, y: np.ndarray) -> float:
    """sqrt((y-mean)^T C^-1 (y-mean)) via triangular solve, never an explicit
    inverse."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != model.mean.shape:
        raise InsufficientDataError(
            f"dimension mismatch: model is D={model.dim}, query has shape {y.shape}"
        )
    z = solve_triangular(model.cholesky_factor, y - model.mean, lower=True)
    return float(np.sqrt(z @ z))


def mahalanobis_distance_batch(model: GaussianModel, Y: np.ndarray) -> np.ndarray:
    """Vectorized mahalanobis_distance over the rows of an N x D matrix."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != model.dim:
        raise InsufficientDataError(
            f"dimension mismatch: model is D={model.dim}, queries have shape {Y.shape}"
        )
    Z = solve_triangular(model.cholesky_factor, (Y - model.mean).T, lower=True)
    return np.sqrt(np.einsum("ij,ij->j", Z, Z))
