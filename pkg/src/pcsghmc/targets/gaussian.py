"""Multivariate Gaussian target with analytic potential, gradient and sampler."""

from __future__ import annotations

import numpy as np

from pcsghmc.errors import ConfigError
from pcsghmc.targets.base import Target


class GaussianTarget(Target):
    """U(w) = 0.5 (w - mean)^T cov^{-1} (w - mean); the constant is dropped,
    so the potential is exactly zero at the mode."""

    def __init__(self, mean, cov):
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ConfigError("mean must be (D,) and cov (D, D)")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ConfigError("covariance must be symmetric")
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("covariance must be positive definite") from exc
        self.mean = mean
        self.cov = cov
        self.precision = np.linalg.inv(cov)
        self.dim = mean.size

    def potential_batch(self, w: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(w) - self.mean
        return 0.5 * np.einsum("ki,ij,kj->k", d, self.precision, d)

    def gradient_batch(self, w: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(w) - self.mean) @ self.precision

    def prior_variance_unconstrained(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    def exact_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._chol.T


def correlated_gaussian(dim: int, rho: float) -> GaussianTarget:
    """Zero-mean, unit-variance Gaussian with all pairwise correlations rho."""
    if not -1.0 / (dim - 1) < rho < 1.0:
        raise ConfigError(f"equicorrelation rho={rho} invalid for D={dim}")
    cov = np.full((dim, dim), rho)
    np.fill_diagonal(cov, 1.0)
    return GaussianTarget(np.zeros(dim), cov)


def anisotropic_gaussian(eigenvalues, rotation=None) -> GaussianTarget:
    """Zero-mean Gaussian with the given covariance eigenvalues.

    Axis-aligned by default; `rotation` (orthonormal Q) maps the principal
    axes to Q's columns: cov = Q diag(eig) Q^T.
    """
    eig = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(eig <= 0):
        raise ConfigError("eigenvalues must be positive")
    if rotation is None:
        cov = np.diag(eig)
    else:
        Q = np.asarray(rotation, dtype=np.float64)
        cov = Q @ np.diag(eig) @ Q.T
        cov = 0.5 * (cov + cov.T)
    return GaussianTarget(np.zeros(eig.size), cov)
