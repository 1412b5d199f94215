"""Online principal-direction tracking via EMA-smoothed power iteration.

The rotation frame holds one unit direction per coordinate (columns of
``P``) plus the un-normalized EMA "statistical vectors" whose norms carry
the eigenvalue magnitudes.  Chain states are stored as coefficients in
this basis; the physical parameter point is ``P @ theta``.  When the
frame rotates, states are re-expressed so the physical point is
unchanged.

An optional pinned coordinate (a predictive-error parameter) never
participates: its row and column of ``P`` stay exactly at the
identity's, and its component of every centered sample is zeroed before
any direction statistic is formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_NORM_FLOOR = 1e-12


def statistical_vector(samples: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Sample second-moment matrix applied to ``n``: (1/K) sum <w,n> w."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    proj = samples @ n
    return (proj[:, None] * samples).mean(axis=0)


def alignment_property_check(
    samples: np.ndarray, n: np.ndarray, v1: np.ndarray
) -> bool:
    """One power step never decreases squared alignment with the leading
    subspace (test-support predicate)."""
    out = statistical_vector(samples, n)
    nrm = np.linalg.norm(out)
    if nrm < _NORM_FLOOR:
        return True
    out = out / nrm
    return float(out @ v1) ** 2 >= float(n @ v1) ** 2 - 1e-12


def deflate(sample: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Remove projections onto the given orthonormal directions.

    ``sample`` may be a single vector or a batch of row vectors.
    """
    sample = np.asarray(sample, dtype=float)
    directions = np.asarray(directions, dtype=float)
    if directions.size == 0:
        return sample.copy()
    directions = np.atleast_2d(directions)
    return sample - (sample @ directions.T) @ directions


def _orthogonal_completion(established: np.ndarray, dim: int) -> np.ndarray:
    # deterministic replacement: start from the standard basis vector
    # with the largest residual outside the established span
    basis = np.eye(dim)
    resid = deflate(basis, established)
    norms = np.linalg.norm(resid, axis=1)
    best = int(np.argmax(norms))
    if norms[best] < _NORM_FLOOR:
        raise ConfigError("established directions already span the space")
    return resid[best] / norms[best]


def reorthogonalize(
    p_vec: np.ndarray, n_vec: np.ndarray, established: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Project both vectors out of the established span.

    The direction residual is unit-normalized; the statistical vector's
    residual is divided by the direction residual's norm, which keeps
    its magnitude when the two are parallel.  A direction that has
    collapsed into the established span is replaced by a deterministic
    orthogonal completion carrying the previous magnitude.
    """
    established = np.atleast_2d(np.asarray(established, dtype=float))
    if established.size == 0:
        return np.array(p_vec, dtype=float), np.array(n_vec, dtype=float)
    n_res = deflate(n_vec, established)
    p_res = deflate(p_vec, established)
    n_norm = np.linalg.norm(n_res)
    if n_norm < _NORM_FLOOR:
        fresh = _orthogonal_completion(established, established.shape[1])
        return float(np.linalg.norm(p_vec)) * fresh, fresh
    return p_res / n_norm, n_res / n_norm


@dataclass
class RotationFrame:
    """Rotation state: ``P`` columns are unit directions, ``p_vecs`` rows
    are their EMA statistical vectors, ``sigmas`` the current published
    per-direction standard deviations."""

    P: np.ndarray
    p_vecs: np.ndarray
    sigmas: np.ndarray
    sigma_index: int | None = None

    @classmethod
    def identity(
        cls,
        dim: int,
        sigma0: np.ndarray,
        sigma_index: int | None = None,
        init_scale: str = "sigma",
    ) -> "RotationFrame":
        sigma0 = np.broadcast_to(np.asarray(sigma0, dtype=float), (dim,)).copy()
        if np.any(sigma0 <= 0) or not np.all(np.isfinite(sigma0)):
            raise ConfigError("initial sigmas must be finite and positive")
        if sigma_index is not None and not 0 <= sigma_index < dim:
            raise ConfigError(f"sigma_index {sigma_index} out of range for dim {dim}")
        if init_scale == "sigma":
            mag = sigma0
        elif init_scale == "sigma_sq":
            mag = sigma0**2
        else:
            raise ConfigError(f"unknown init_scale {init_scale!r}")
        p_vecs = np.diag(mag).astype(float)
        if sigma_index is not None:
            p_vecs[sigma_index] = 0.0
            p_vecs[sigma_index, sigma_index] = 1.0
        return cls(
            P=np.eye(dim),
            p_vecs=p_vecs,
            sigmas=sigma0,
            sigma_index=sigma_index,
        )

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    def free_indices(self) -> list[int]:
        return [d for d in range(self.dim) if d != self.sigma_index]

    def copy(self) -> "RotationFrame":
        return RotationFrame(
            P=self.P.copy(),
            p_vecs=self.p_vecs.copy(),
            sigmas=self.sigmas.copy(),
            sigma_index=self.sigma_index,
        )

    def validate(self) -> None:
        gram = self.P.T @ self.P
        if np.max(np.abs(gram - np.eye(self.dim))) > 1e-10:
            raise ConfigError("rotation columns lost orthonormality")
        if abs(abs(np.linalg.det(self.P)) - 1.0) > 1e-8:
            raise ConfigError("rotation determinant drifted from +-1")
        if self.sigma_index is not None:
            s = self.sigma_index
            unit = np.zeros(self.dim)
            unit[s] = 1.0
            if not (
                np.array_equal(self.P[s, :], unit)
                and np.array_equal(self.P[:, s], unit)
            ):
                raise ConfigError("pinned coordinate row/column not identity")


def rearrange_if_needed(
    frame: RotationFrame, sigmas: np.ndarray
) -> tuple[RotationFrame, np.ndarray]:
    """Reorder directions into descending sigma when any adjacent free
    pair is out of order by more than the 1.1 factor.

    Returns the (possibly new) frame and the permutation applied, as an
    index array such that new[d] = old[perm[d]]; the caller permutes any
    per-direction chain state (state coefficients, relaxation factors,
    strike counts) the same way.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    free = frame.free_indices()
    identity = np.arange(frame.dim)
    trigger = any(
        sigmas[free[i + 1]] > 1.1 * sigmas[free[i]] for i in range(len(free) - 1)
    )
    if not trigger:
        return frame, identity
    order = sorted(free, key=lambda d: -sigmas[d])  # stable: ties keep index order
    perm = identity.copy()
    for slot, src in zip(free, order):
        perm[slot] = src
    out = RotationFrame(
        P=frame.P[:, perm],
        p_vecs=frame.p_vecs[perm],
        sigmas=sigmas[perm],
        sigma_index=frame.sigma_index,
    )
    return out, perm


def pcd_step(
    frame: RotationFrame,
    batch: np.ndarray,
    m_hat: np.ndarray,
    beta3: float,
    sigmas_prev: np.ndarray,
    stats_mask: np.ndarray | None = None,
) -> tuple[RotationFrame, np.ndarray, np.ndarray]:
    """One full direction-tracking step.

    ``batch`` holds K coefficient-state rows; ``m_hat`` is the robust
    mean of the physical samples.  Performs rearrangement, centering,
    per-direction deflation / reorthogonalization / EMA update /
    normalization, frame assembly, and state re-expression.  Chains with
    non-finite coordinates are excluded from the statistics but still
    re-expressed; ``stats_mask`` excludes further rows (non-converged
    chains) the same way.  With no contributing rows the directions are
    carried unchanged.  Returns (new frame, re-expressed batch,
    permutation).
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[1] != frame.dim:
        raise ConfigError(f"batch dim {batch.shape[1]} != frame dim {frame.dim}")

    frame, perm = rearrange_if_needed(frame, sigmas_prev)
    batch = batch[:, perm]
    p_prev = frame.P

    finite = np.isfinite(batch).all(axis=1)
    if stats_mask is not None:
        finite = finite & np.asarray(stats_mask, dtype=bool)
    physical = batch[finite] @ p_prev.T
    centered = physical - np.asarray(m_hat, dtype=float)
    if frame.sigma_index is not None:
        centered[:, frame.sigma_index] = 0.0

    new_p = p_prev.copy()
    new_vecs = frame.p_vecs.copy()
    established: list[np.ndarray] = []
    if frame.sigma_index is not None:
        pin = np.zeros(frame.dim)
        pin[frame.sigma_index] = 1.0
        established.append(pin)

    for d in frame.free_indices():
        n_dir = p_prev[:, d]
        p_vec = frame.p_vecs[d]
        est = np.asarray(established)
        if est.size:
            resid = deflate(centered, est)
            p_vec, n_dir = reorthogonalize(p_vec, n_dir, est)
        else:
            resid = centered
        if resid.shape[0] > 0:
            ipt = statistical_vector(resid, n_dir)
            p_vec = beta3 * p_vec + (1.0 - beta3) * ipt
        nrm = np.linalg.norm(p_vec)
        if nrm > _NORM_FLOOR:
            n_dir = p_vec / nrm
        new_vecs[d] = p_vec
        new_p[:, d] = n_dir
        established.append(n_dir)

    out = RotationFrame(
        P=new_p,
        p_vecs=new_vecs,
        sigmas=frame.sigmas.copy(),
        sigma_index=frame.sigma_index,
    )
    # re-express coefficients in the new basis; physical point unchanged
    batch_new = batch @ (p_prev.T @ new_p)
    return out, batch_new, perm
