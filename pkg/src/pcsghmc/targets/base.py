"""Target-distribution contract and rotated-frame evaluation helpers.

A target exposes the negative log posterior ("potential") and its gradient
in an unconstrained parameter space. Samplers may work in a rotated frame
theta with w = P theta; the potential is frame-invariant and gradients pull
back through P^T.
"""

from __future__ import annotations

import abc

import numpy as np

from pcsghmc.errors import ConfigError


class Target(abc.ABC):
    """Negative log posterior with gradient, on an unconstrained domain."""

    #: problem dimension
    dim: int
    #: index of the observation-noise coordinate, or None. This coordinate
    #: is pinned: rotation matrices must keep it on the identity axis.
    sigma_index: int | None = None

    @abc.abstractmethod
    def potential_batch(self, w: np.ndarray) -> np.ndarray:
        """U at each row of w ((K, D) -> (K,)); +inf allowed, never NaN."""

    @abc.abstractmethod
    def gradient_batch(self, w: np.ndarray) -> np.ndarray:
        """grad U at each row of w ((K, D) -> (K, D))."""

    def potential(self, w: np.ndarray) -> float:
        return float(self.potential_batch(np.asarray(w, dtype=np.float64)[None, :])[0])

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return self.gradient_batch(np.asarray(w, dtype=np.float64)[None, :])[0]

    def prior_variance_unconstrained(self) -> np.ndarray:
        """Per-coordinate prior variances in this (unconstrained) space."""
        return np.ones(self.dim)

    def exact_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact i.i.d. samples when available (used by tests/diagnostics)."""
        raise NotImplementedError(f"{type(self).__name__} has no exact sampler")


def validate_rotation(P: np.ndarray, dim: int, sigma_index: int | None = None) -> None:
    """Reject rotation matrices that are not orthonormal (or unpin sigma).

    Raises ConfigError; tolerance 1e-10 on max |P^T P - I|. When sigma_index
    is given, that row and column must be exactly the identity axis.
    """
    P = np.asarray(P)
    if P.shape != (dim, dim):
        raise ConfigError(f"rotation must be {dim}x{dim}, got {P.shape}")
    err = np.max(np.abs(P.T @ P - np.eye(dim)))
    if not err <= 1e-10:
        raise ConfigError(f"rotation is not orthonormal (max deviation {err:.3e})")
    if sigma_index is not None:
        axis = np.zeros(dim)
        axis[sigma_index] = 1.0
        if not (np.array_equal(P[sigma_index], axis) and np.array_equal(P[:, sigma_index], axis)):
            raise ConfigError("rotation must leave the noise coordinate pinned")


def rotated_potential(target: Target, P: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """U in the rotated frame: U_theta(theta) = U_w(P theta), batched rows."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    return target.potential_batch(theta @ P.T)


def rotated_gradient(target: Target, P: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """grad_theta U = P^T grad_w U(P theta), batched rows."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    return target.gradient_batch(theta @ P.T) @ P


def fd_gradient(func, w: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of (D,)."""
    w = np.asarray(w, dtype=np.float64)
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = step
        g[i] = (func(w + e) - func(w - e)) / (2.0 * step)
    return g
