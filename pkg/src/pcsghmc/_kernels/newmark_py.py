"""NumPy fallback for the Newmark time-stepping loop.

Identical contract to the Cython kernel `_newmark.time_loop`; used when the
compiled extension is unavailable.
"""

from __future__ import annotations

import numpy as np


def time_loop(masses, C, Khat_inv, ground_accel, dt):
    """Constant-average-acceleration Newmark integration, batched.

    masses (n,), C (B,n,n), Khat_inv (B,n,n), ground_accel (T,).
    Starts from rest; returns absolute accelerations (B, T, n). Sample 0 is
    the at-rest state (relative acceleration -ag[0], absolute 0).
    """
    m = np.asarray(masses, dtype=np.float64)
    ag = np.asarray(ground_accel, dtype=np.float64)
    B, n, _ = C.shape
    T = ag.shape[0]
    out = np.zeros((B, T, n))

    u = np.zeros((B, n))
    v = np.zeros((B, n))
    a = np.full((B, n), -ag[0])
    out[:, 0, :] = a + ag[0]

    inv_dt = 1.0 / dt
    for j in range(1, T):
        f = -m[None, :] * ag[j]
        rhs = f + m[None, :] * (4.0 * u * inv_dt**2 + 4.0 * v * inv_dt + a)
        rhs += np.einsum("bij,bj->bi", C, 2.0 * u * inv_dt + v)
        u_new = np.einsum("bij,bj->bi", Khat_inv, rhs)
        a_new = 4.0 * (u_new - u) * inv_dt**2 - 4.0 * v * inv_dt - a
        v = v + 0.5 * dt * (a + a_new)
        u, a = u_new, a_new
        out[:, j, :] = a + ag[j]
    return out
