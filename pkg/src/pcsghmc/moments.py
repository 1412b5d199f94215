"""Decay-scheduled EMA trackers for means, variances, and chain energies.

All trackers share one design: exponential moving averages whose decay
rates are driven by an effective-window schedule, together with running
products of the decay rates that make exact bias correction possible at
any step.  Two corrections are exposed for each tracker:

* ``bias_correct``   -- exact inversion of the init transient.
* ``robust_correct`` -- first-order inversion that stays finite when the
  decay product is near 1 (early steps with long windows).

The robust mean is what feeds centering and drift terms downstream; the
exact forms are what the unbiasedness guarantees are stated for.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "DecaySchedule",
    "t_hat_at",
    "beta1_of",
    "beta2_of",
    "ema_weight_ratio",
    "MomentTracker",
    "EnergyMomentTracker",
    "gaussian_energy_reference",
]


@dataclass(frozen=True)
class DecaySchedule:
    """Effective-window schedule: hold at ``t_hat_min`` for ``t_burn``
    steps, then grow linearly as ``t - t_burn`` until ``t_hat_max``."""

    t_burn: int
    t_hat_min: int
    t_hat_max: int

    def __post_init__(self) -> None:
        if self.t_hat_min < 1:
            raise ConfigError(f"t_hat_min must be >= 1, got {self.t_hat_min}")
        if self.t_hat_max < self.t_hat_min:
            raise ConfigError(
                f"t_hat_max ({self.t_hat_max}) < t_hat_min ({self.t_hat_min})"
            )
        if self.t_burn < 0:
            raise ConfigError(f"t_burn must be >= 0, got {self.t_burn}")
        if self.t_burn < 0.1 * self.t_hat_min:
            warnings.warn(
                "decay schedule ramps almost immediately "
                f"(t_burn={self.t_burn} < 0.1 * t_hat_min={self.t_hat_min}); "
                "early estimates will be noisy",
                stacklevel=2,
            )


def t_hat_at(schedule: DecaySchedule, t: int) -> int:
    """Effective window length at (1-based) update step ``t``."""
    if t < 1:
        raise ConfigError(f"update step must be >= 1, got {t}")
    return min(schedule.t_hat_max, max(schedule.t_hat_min, t - schedule.t_burn))


def beta1_of(t_hat: float) -> float:
    """Mean-tracker decay rate for effective window ``t_hat``."""
    if t_hat < 1:
        raise ConfigError(f"t_hat must be >= 1, got {t_hat}")
    return (t_hat - 1.0) / t_hat


def beta2_of(t_hat: float, n_chains: int) -> float:
    """Variance-tracker decay rate; each update sees ``n_chains`` draws.

    Needs t_hat * n_chains >= n_chains + 1, i.e. at least one effective
    extra draw, otherwise the rate would be negative.
    """
    if n_chains < 1:
        raise ConfigError(f"n_chains must be >= 1, got {n_chains}")
    prod = t_hat * n_chains
    if prod < n_chains + 1:
        raise ConfigError(
            f"t_hat * n_chains = {prod} < n_chains + 1 = {n_chains + 1}"
        )
    return (prod - n_chains - 1.0) / (prod - 1.0)


def ema_weight_ratio(beta: float, t: int) -> float:
    """Ratio of the EMA's oldest-sample weight share to a flat average's.

    Starts at the effective window 1/(1-beta) at t=1 and decays toward
    1/(1+beta); it first drops below 1 near t = ln(3)/(1-beta), which is
    the point where the EMA stops over-weighting history relative to a
    flat mean over the same span.
    """
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"beta must be in [0, 1), got {beta}")
    if t < 1:
        raise ConfigError(f"t must be >= 1, got {t}")
    bt = beta**t
    return (1.0 + bt) / ((1.0 - bt) * (1.0 + beta))


def _drift_ratio(t_hat_mean: float, t_hat_var: float) -> float:
    # t_hat_var > 1 is guaranteed by beta2_of's precondition for K >= 2;
    # K = 1 with t_hat_var slightly above (K+1)/K needs the guard.
    denom = t_hat_var * (t_hat_var - 1.0)
    if denom <= 0.0:
        raise ConfigError(
            f"variance window too short for drift term: t_hat={t_hat_var}"
        )
    return t_hat_mean * (t_hat_mean - 1.0) / denom


class MomentTracker:
    """Per-coordinate EMA mean and variance with drift compensation.

    The mean is tracked from batch means; the variance update centers
    the raw batch on the current robust mean and adds a term
    compensating the variance contributed by the mean's own motion
    between updates, so that slow drift is not double counted as
    spread.  Decay products ``pi1``/``pi2`` advance only on executed
    updates; empty batches leave the tracker untouched.
    """

    def __init__(self, dim: int, v0_star: np.ndarray | float = 1.0) -> None:
        if dim < 1:
            raise ConfigError(f"dim must be >= 1, got {dim}")
        self.dim = int(dim)
        v0 = np.broadcast_to(np.asarray(v0_star, dtype=float), (self.dim,)).copy()
        if np.any(v0 <= 0.0) or not np.all(np.isfinite(v0)):
            raise ConfigError("v0_star entries must be finite and positive")
        self.v0_star = v0
        self.m = np.zeros(self.dim)
        self.v = v0.copy()
        self.pi1 = 1.0
        self.pi2 = 1.0
        self.updates = 0
        self._m_hat = np.zeros(self.dim)
        self._m_hat_prev = np.zeros(self.dim)

    @property
    def m_hat(self) -> np.ndarray:
        """Robust bias-corrected mean after the latest update."""
        return self._m_hat.copy()

    @property
    def m_hat_prev(self) -> np.ndarray:
        """Robust mean after the previous update (equals ``m_hat`` at t=1)."""
        return self._m_hat_prev.copy()

    def update_mean(self, batch: np.ndarray, beta1: float) -> np.ndarray:
        """EMA step on the batch mean; returns the robust corrected mean."""
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        if batch.shape[0] == 0:
            return self.m_hat
        if batch.shape[1] != self.dim:
            raise ConfigError(f"batch dim {batch.shape[1]} != {self.dim}")
        self.pi1 *= beta1
        self.m = beta1 * self.m + (1.0 - beta1) * batch.mean(axis=0)
        m_hat = (1.0 + self.pi1) * self.m
        # first executed update: previous mean defined equal, zero drift
        self._m_hat_prev = m_hat if self.updates == 0 else self._m_hat
        self._m_hat = m_hat
        self.updates += 1
        return m_hat.copy()

    def update_variance(
        self,
        batch: np.ndarray,
        center: np.ndarray,
        center_prev: np.ndarray,
        beta2: float,
        t_hat_mean: float,
        t_hat_var: float,
        n_chains: int,
    ) -> None:
        """EMA step on per-coordinate spread around ``center``.

        ``center``/``center_prev`` are the robust means of the two most
        recent mean updates, expressed in the same frame as ``batch``
        (the caller back-rotates them if the batch frame differs from
        the mean-tracking frame).  ``n_chains`` is the nominal batch
        size the decay rates were derived for, not ``len(batch)``.
        """
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        if batch.shape[0] == 0:
            return
        if batch.shape[1] != self.dim:
            raise ConfigError(f"batch dim {batch.shape[1]} != {self.dim}")
        center = np.asarray(center, dtype=float)
        center_prev = np.asarray(center_prev, dtype=float)
        self.pi2 *= beta2
        dev = np.mean((batch - center) ** 2, axis=0)
        drift_coef = (beta2 / (1.0 - beta2) + 1.0 / n_chains) * _drift_ratio(
            t_hat_mean, t_hat_var
        )
        instant = dev + drift_coef * (center - center_prev) ** 2
        self.v = beta2 * self.v + (1.0 - beta2) * instant

    def permute(self, perm: np.ndarray) -> None:
        """Relabel the per-coordinate variance state after the caller
        reorders its coordinate system.

        Only the variance side moves: ``v`` and its init anchor follow the
        coordinates they describe, while the mean state lives in the fixed
        ambient frame and stays put.
        """
        perm = np.asarray(perm, dtype=int)
        if sorted(perm.tolist()) != list(range(self.dim)):
            raise ConfigError("perm must be a permutation of the coordinates")
        self.v = self.v[perm]
        self.v0_star = self.v0_star[perm]

    def bias_correct(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact transient inversion: unbiased but unstable near pi = 1."""
        if self.pi1 >= 1.0 or self.pi2 >= 1.0:
            raise ConfigError("bias_correct before any executed update")
        m_hat = self.m / (1.0 - self.pi1)
        v_hat = (self.v - self.pi2 * self.v0_star) / (1.0 - self.pi2)
        return m_hat, v_hat

    def robust_correct(self) -> tuple[np.ndarray, np.ndarray]:
        """First-order transient inversion, finite at every step."""
        m_hat = (1.0 + self.pi1) * self.m
        v_hat = self.v + self.pi2 * (self.v - self.v0_star)
        return m_hat, v_hat


class EnergyMomentTracker:
    """Scalar energy mean/variance tracker with fixed decay rates.

    Pools all chains' potential values each step.  The variance is
    seeded at dim/2, the stationary energy variance of a standard
    Gaussian in ``dim`` dimensions, and published with the robust
    correction so early steps stay finite.
    """

    def __init__(
        self,
        dim: int,
        n_chains: int,
        beta1: float = 0.98,
        beta2: float = 0.99,
    ) -> None:
        if dim < 1 or n_chains < 1:
            raise ConfigError("dim and n_chains must be >= 1")
        self.dim = int(dim)
        self.n_chains = int(n_chains)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.v0 = 0.5 * self.dim
        self.m = 0.0
        self.v = self.v0
        self.t = 0
        self._m_hat = 0.0
        self._m_hat_prev = 0.0
        self._t_hat_mean = 1.0 / (1.0 - self.beta1)
        self._t_hat_var = 1.0 / (1.0 - self.beta2) + 1.0 / self.n_chains

    @property
    def mu(self) -> float:
        """Published energy mean (0 before the first update)."""
        return 0.0 if self.t == 0 else self.m / (1.0 - self.beta1**self.t)

    @property
    def var(self) -> float:
        """Published energy variance (dim/2 before the first update)."""
        if self.t == 0:
            return self.v0
        pi2 = self.beta2**self.t
        return self.v + pi2 * (self.v - self.v0)

    @property
    def sigma(self) -> float:
        return float(np.sqrt(max(self.var, 0.0)))

    def step(self, energies: np.ndarray) -> None:
        energies = np.asarray(energies, dtype=float).ravel()
        if energies.size == 0:
            return
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * energies.mean()
        m_hat = self.m / (1.0 - self.beta1**self.t)
        self._m_hat_prev = m_hat if self.t == 1 else self._m_hat
        self._m_hat = m_hat
        dev = np.mean((energies - m_hat) ** 2)
        drift_coef = (
            self.beta2 / (1.0 - self.beta2) + 1.0 / self.n_chains
        ) * _drift_ratio(self._t_hat_mean, self._t_hat_var)
        instant = dev + drift_coef * (m_hat - self._m_hat_prev) ** 2
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * instant


def gaussian_energy_reference(dim: int) -> tuple[float, float]:
    """Stationary mean and variance of the potential of a ``dim``-D
    Gaussian measured from its mode: both equal dim/2."""
    return 0.5 * dim, 0.5 * dim
