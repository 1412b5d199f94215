"""Structural-system assembly for the shear-building forward model.

A shear building with n stories is a chain of lumped masses; story i
(0-based) is connected to story i-1 (or the ground for i=0) by a lateral
stiffness k_i. Damping is Rayleigh, calibrated to a fixed modal damping
ratio on the first two modes (or the single mode when n == 1).
"""

from __future__ import annotations

import numpy as np


def stiffness_matrix(k_story: np.ndarray) -> np.ndarray:
    """Assemble tridiagonal shear stiffness matrices.

    k_story: (B, n) story stiffnesses -> (B, n, n) matrices.
    """
    k_story = np.asarray(k_story, dtype=np.float64)
    B, n = k_story.shape
    K = np.zeros((B, n, n))
    idx = np.arange(n)
    K[:, idx, idx] = k_story
    K[:, idx[:-1], idx[:-1]] += k_story[:, 1:]
    K[:, idx[:-1], idx[1:]] = -k_story[:, 1:]
    K[:, idx[1:], idx[:-1]] = -k_story[:, 1:]
    return K


def rayleigh_coefficients(masses: np.ndarray, K: np.ndarray, zeta: float = 0.02):
    """Rayleigh coefficients (a0, a1) giving damping ratio `zeta` on modes 1-2.

    masses: (n,), K: (B, n, n) -> a0, a1 each (B,).
    For a single-story system a1 = 0 and a0 = 2*zeta*omega1.
    """
    m = np.asarray(masses, dtype=np.float64)
    B, n, _ = K.shape
    inv_sqrt_m = 1.0 / np.sqrt(m)
    # Symmetric eigenproblem on M^{-1/2} K M^{-1/2}.
    A = K * inv_sqrt_m[None, :, None] * inv_sqrt_m[None, None, :]
    lam = np.linalg.eigvalsh(A)
    omega = np.sqrt(np.maximum(lam, 0.0))
    if n == 1:
        a0 = 2.0 * zeta * omega[:, 0]
        a1 = np.zeros(B)
    else:
        w1, w2 = omega[:, 0], omega[:, 1]
        a0 = 2.0 * zeta * w1 * w2 / (w1 + w2)
        a1 = 2.0 * zeta / (w1 + w2)
    return a0, a1


def assemble_system(masses, k_story, dt, zeta=0.02):
    """Precompute the per-column matrices the Newmark loop needs.

    Returns (C, Khat_inv): damping matrices (B,n,n) and the inverses of the
    constant-average-acceleration effective stiffness (B,n,n).
    """
    m = np.asarray(masses, dtype=np.float64)
    K = stiffness_matrix(k_story)
    a0, a1 = rayleigh_coefficients(m, K, zeta)
    C = a0[:, None, None] * np.eye(len(m))[None] * m[None, :, None] + a1[:, None, None] * K
    Khat = K + (2.0 / dt) * C + (4.0 / dt**2) * np.eye(len(m))[None] * m[None, :, None]
    Khat_inv = np.linalg.inv(Khat)
    return C, Khat_inv
