"""Bayesian shear-building model-updating target.

Parameters are dimensionless story-stiffness scales plus the ratio of the
prediction-error standard deviation to a nominal value sigma0. All of them
are mapped to an unconstrained space through a logistic transform over the
truncation interval, so the sampler never sees the bounds.

Likelihood: independent Gaussians on every observed floor-acceleration
sample with standard deviation sigma = w_sigma * sigma0. Priors: truncated
Gaussian (mean 1, c.o.v. 10%) on each stiffness scale, truncated lognormal
(median 1, log-sd 0.3) on the noise ratio. Gradients are central finite
differences in the unconstrained space (the forward model is not
differentiated analytically).
"""

from __future__ import annotations

import numpy as np

from pcsghmc._kernels import newmark_batch
from pcsghmc.errors import ConfigError
from pcsghmc.rng import stream
from pcsghmc.targets.base import Target

LOG_2PI = float(np.log(2.0 * np.pi))


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class ShearBuildingTarget(Target):
    """Posterior over (stiffness scales, noise ratio) in unconstrained space."""

    def __init__(self, masses, k0, dt, ground_accel, data, sigma0,
                 observed_dofs=None, bounds=(0.1, 2.0), stiffness_prior=(1.0, 0.1),
                 sigma_log_sd=0.3, fd_step=1e-6, zeta=0.02):
        self.masses = np.asarray(masses, dtype=np.float64)
        self.k0 = np.asarray(k0, dtype=np.float64)
        self.n_stories = self.masses.size
        if self.k0.shape != (self.n_stories,):
            raise ConfigError("k0 must match the number of stories")
        self.dt = float(dt)
        self.ground_accel = np.asarray(ground_accel, dtype=np.float64)
        self.observed_dofs = (list(range(self.n_stories)) if observed_dofs is None
                              else list(observed_dofs))
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.shape != (self.ground_accel.size, len(self.observed_dofs)):
            raise ConfigError(
                f"data must be (n_t, n_observed) = "
                f"({self.ground_accel.size}, {len(self.observed_dofs)}), got {self.data.shape}")
        self.sigma0 = float(sigma0)
        if self.sigma0 <= 0:
            raise ConfigError("sigma0 must be positive")
        self.lo, self.hi = float(bounds[0]), float(bounds[1])
        if not 0 < self.lo < self.hi:
            raise ConfigError("bounds must satisfy 0 < lo < hi")
        self.stiffness_prior = (float(stiffness_prior[0]), float(stiffness_prior[1]))
        self.sigma_log_sd = float(sigma_log_sd)
        self.fd_step = float(fd_step)
        self.zeta = float(zeta)
        self.dim = self.n_stories + 1
        self.sigma_index = self.n_stories
        self.n_samples = self.data.size

    # -- parameter transforms -------------------------------------------------

    def constrain(self, u: np.ndarray) -> np.ndarray:
        """Unconstrained -> dimensionless parameters in (lo, hi)."""
        return self.lo + (self.hi - self.lo) * _sigmoid(np.asarray(u, dtype=np.float64))

    def unconstrain(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        z = (w - self.lo) / (self.hi - self.lo)
        return np.log(z) - np.log1p(-z)

    # -- forward model and likelihood ----------------------------------------

    def predict(self, w_stiff: np.ndarray) -> np.ndarray:
        """Absolute accelerations at observed floors, (B, n_t, n_obs)."""
        w_stiff = np.atleast_2d(np.asarray(w_stiff, dtype=np.float64))
        k = w_stiff * self.k0
        acc = newmark_batch(self.masses, k, self.ground_accel, self.dt, self.zeta)
        return acc[:, :, self.observed_dofs]

    def _sse(self, w_stiff: np.ndarray) -> np.ndarray:
        resid = self.predict(w_stiff) - self.data
        return np.einsum("bto,bto->b", resid, resid)

    def neg_log_likelihood_from_sse(self, w_sigma, sse):
        sig = np.asarray(w_sigma, dtype=np.float64) * self.sigma0
        return 0.5 * self.n_samples * (LOG_2PI + 2.0 * np.log(sig)) + sse / (2.0 * sig**2)

    def neg_log_likelihood(self, w: np.ndarray) -> np.ndarray:
        """Gaussian misfit of the dimensionless parameter rows (B, D) -> (B,)."""
        w = np.atleast_2d(np.asarray(w, dtype=np.float64))
        return self.neg_log_likelihood_from_sse(w[:, -1], self._sse(w[:, :-1]))

    def _neg_log_prior(self, w: np.ndarray) -> np.ndarray:
        mu, sd = self.stiffness_prior
        out = np.sum(0.5 * ((w[:, :-1] - mu) / sd) ** 2, axis=1)
        lw = np.log(w[:, -1])
        out += lw + 0.5 * (lw / self.sigma_log_sd) ** 2
        return out

    # -- Target contract -------------------------------------------------------

    def _potential_given_sse(self, u, s, w, sse):
        # jacobian of the logistic map: dw/du = (hi-lo) s (1-s)
        njac = -np.sum(np.log((self.hi - self.lo) * s * (1.0 - s)), axis=1)
        return self.neg_log_likelihood_from_sse(w[:, -1], sse) + self._neg_log_prior(w) + njac

    def potential_batch(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        s = _sigmoid(u)
        w = self.lo + (self.hi - self.lo) * s
        return self._potential_given_sse(u, s, w, self._sse(w[:, :-1]))

    def gradient_batch(self, u: np.ndarray) -> np.ndarray:
        """Central finite differences; one batched forward-model call."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        K, D = u.shape
        h = self.fd_step
        ns = self.n_stories
        # Perturbed copies: for each point, +/-h on every coordinate. Only
        # stiffness coordinates change the simulated response; the sigma
        # coordinate reuses the unperturbed SSE.
        pert = np.repeat(u[:, None, :], 2 * D, axis=1)  # (K, 2D, D)
        for i in range(D):
            pert[:, 2 * i, i] += h
            pert[:, 2 * i + 1, i] -= h
        flat = pert.reshape(K * 2 * D, D)
        s = _sigmoid(flat)
        w = self.lo + (self.hi - self.lo) * s

        sse = np.empty(K * 2 * D)
        stiff_rows = np.ones(K * 2 * D, dtype=bool)
        idx = np.arange(K * 2 * D)
        stiff_rows[(idx % (2 * D)) // 2 >= ns] = False  # sigma-coordinate rows
        sse[stiff_rows] = self._sse(w[stiff_rows, :-1])
        if not stiff_rows.all():
            base_sse = self._sse(self.constrain(u)[:, :-1])
            sse[~stiff_rows] = np.repeat(base_sse, 2 * (D - ns))
        pots = self._potential_given_sse(flat, s, w, sse).reshape(K, 2 * D)
        return (pots[:, 0::2] - pots[:, 1::2]) / (2.0 * h)

    def prior_variance_unconstrained(self) -> np.ndarray:
        """Variance of each unconstrained coordinate under its truncated prior
        (composite Simpson quadrature; deterministic)."""
        n_pts = 4001
        eps = 1e-9 * (self.hi - self.lo)
        w = np.linspace(self.lo + eps, self.hi - eps, n_pts)
        u = self.unconstrain(w)
        out = np.empty(self.dim)
        mu, sd = self.stiffness_prior
        dens_k = np.exp(-0.5 * ((w - mu) / sd) ** 2)
        dens_s = np.exp(-0.5 * (np.log(w) / self.sigma_log_sd) ** 2) / w
        for i, dens in enumerate([dens_k] * self.n_stories + [dens_s]):
            z = _simpson(dens, w)
            m1 = _simpson(dens * u, w) / z
            m2 = _simpson(dens * u * u, w) / z
            out[i] = m2 - m1 * m1
        return out


def _simpson(y, x):
    n = len(x) - 1
    assert n % 2 == 0
    h = x[1] - x[0]
    return h / 3.0 * (y[0] + y[-1] + 4.0 * np.sum(y[1:-1:2]) + 2.0 * np.sum(y[2:-1:2]))


def toy_shear_target(stories: int = 2, seed: int = 2026, n_t: int = 240,
                     dt: float = 0.01, noise_frac: float = 0.1):
    """Self-contained synthetic 2-story (by default) updating problem.

    Deterministic in `seed`: the same seed always produces the same
    excitation, data record, and therefore the same posterior. The returned
    target carries `.true_w` (data-generating dimensionless parameters).
    """
    rng = stream(seed, "data", stories, n_t)
    raw = rng.standard_normal(n_t + 8)
    win = np.hanning(9)
    ag = np.convolve(raw, win / win.sum(), mode="valid")
    ag = ag / np.sqrt(np.mean(ag**2))
    ag[0] = 0.0

    masses = np.ones(stories)
    k0 = np.full(stories, 600.0)
    w_true = np.linspace(1.15, 0.9, stories)

    clean = newmark_batch(masses, (w_true * k0)[None, :], ag, dt)[0]
    sigma0 = noise_frac * float(np.sqrt(np.mean(clean**2)))
    data = clean + sigma0 * rng.standard_normal(clean.shape)

    target = ShearBuildingTarget(masses, k0, dt, ag, data, sigma0)
    target.true_w = np.concatenate([w_true, [1.0]])
    return target


def load_csv_column_table(path) -> np.ndarray:
    """Read a CSV with a header row into a float64 (rows, cols) array."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
    return arr


def write_csv_column_table(path, array, header) -> None:
    array = np.atleast_2d(np.asarray(array, dtype=np.float64))
    np.savetxt(path, array, delimiter=",", header=",".join(header), comments="", fmt="%.17g")
