"""Chain-quality metrics: autocorrelation, effective sample size, and a
sample-based negative evidence lower bound.

ESS uses the tapered autocorrelation sum with three truncation triggers
(hard lag cap 1000, first even lag whose adjacent pair sums negative, and
the T/3 summation limit); the earliest trigger wins.  The negative ELBO
is the mean archived energy plus the mean leave-one-out log density of a
product-Gaussian kernel estimate over the pooled sample cloud, the same
estimate the trainer's loss uses.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


def config_digest(config) -> str:
    """Stable hex digest of a dataclass-style config, for archive metadata."""
    text = repr(sorted(vars(config).items(), key=lambda kv: kv[0]))
    return hashlib.sha256(text.encode()).hexdigest()

LAG_CAP = 1000
KDE_BANDWIDTH_FLOOR = 1e-3


@dataclass
class ChainArchive:
    """Kept samples of one run plus the metadata needed to audit them.

    ``samples[t, k]`` is chain k's t-th kept parameter-frame vector;
    ``energies[t, k]`` its potential.  ``frame_p`` and ``sigmas`` record
    the final rotation state (identity frame for samplers that do not
    rotate).  ``runtime_s`` feeds the ESS-per-hour figure.
    """

    samples: np.ndarray          # (n_kept, K, D)
    energies: np.ndarray         # (n_kept, K)
    kept_steps: np.ndarray       # (n_kept,)
    frame_p: np.ndarray          # (D, D)
    sigmas: np.ndarray           # (D,)
    seed: int
    config_hash: str
    method: str = "apm"
    target: str = ""
    thinning: int = 1
    n_steps: int = 0
    runtime_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        s = np.asarray(self.samples)
        if s.ndim != 3:
            raise ConfigError("samples must be (n_kept, chains, dim)")
        n_kept, n_chains, dim = s.shape
        if np.asarray(self.energies).shape != (n_kept, n_chains):
            raise ConfigError("energies shape must match samples")
        if np.asarray(self.kept_steps).shape != (n_kept,):
            raise ConfigError("kept_steps must have one entry per kept step")
        if np.asarray(self.frame_p).shape != (dim, dim):
            raise ConfigError("frame_p must be (dim, dim)")
        if np.asarray(self.sigmas).shape != (dim,):
            raise ConfigError("sigmas must be length dim")

    @property
    def n_chains(self) -> int:
        return self.samples.shape[1]

    @property
    def dim(self) -> int:
        return self.samples.shape[2]

    def chain(self, k: int) -> np.ndarray:
        """Chain k's kept samples as a (T, D) array."""
        return self.samples[:, k, :]

    @property
    def pooled(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1])


def autocorrelation(chain: np.ndarray, s: int) -> float:
    """Lag-s autocorrelation sum of a (T, D) chain around its mean.

    Inner-product form over the full vector; lag 0 gives the (biased)
    total scatter.  Not normalized by the lag-0 value.
    """
    chain = np.atleast_2d(np.asarray(chain, dtype=float))
    t_len = chain.shape[0]
    if not 0 <= s < t_len:
        raise ConfigError(f"lag {s} outside [0, {t_len})")
    centered = chain - chain.mean(axis=0)
    front = centered[s:]
    back = centered[: t_len - s]
    return float(np.sum(front * back) / (t_len - s))


def _autocorr_sequence(chain: np.ndarray, max_lag: int) -> np.ndarray:
    """All lag sums 0..max_lag at once via FFT; matches the direct form."""
    centered = chain - chain.mean(axis=0)
    t_len = centered.shape[0]
    n_fft = 1
    while n_fft < 2 * t_len:
        n_fft *= 2
    spec = np.fft.rfft(centered, n=n_fft, axis=0)
    raw = np.fft.irfft(spec * spec.conj(), n=n_fft, axis=0)
    raw = raw[: max_lag + 1].sum(axis=1)
    return raw / (t_len - np.arange(max_lag + 1))


@dataclass(frozen=True)
class EssResult:
    ess: float
    truncation_lag: int      # last lag included in the sum
    degenerate: bool         # constant chain: ESS defined as T


def ess_detail(chain: np.ndarray) -> EssResult:
    """Effective sample size of a (T, D) chain with truncation details."""
    chain = np.atleast_2d(np.asarray(chain, dtype=float))
    t_len = chain.shape[0]
    if t_len < 4:
        raise ConfigError("need at least 4 samples for an ESS estimate")
    cap = min(LAG_CAP, t_len // 3)
    rho = _autocorr_sequence(chain, cap)
    # constant chain up to roundoff: lag-0 scatter at the noise floor
    floor = (1e-12 * (1.0 + np.abs(chain).max())) ** 2
    if rho[0] <= floor:
        return EssResult(ess=float(t_len), truncation_lag=0, degenerate=True)

    total = 0.0
    last = 0
    for s in range(1, cap + 1):
        if s % 2 == 0 and rho[s - 1] + rho[s] < 0.0:
            # noise takeover: drop the offending pair entirely
            total -= (1.0 - (s - 1) / t_len) * rho[s - 1] / rho[0]
            last = s - 2
            break
        total += (1.0 - s / t_len) * rho[s] / rho[0]
        last = s
    denom = max(1.0 + 2.0 * total, 1.0)   # estimates never exceed T
    return EssResult(ess=float(t_len / denom), truncation_lag=last,
                     degenerate=False)


def ess(chain: np.ndarray) -> float:
    return ess_detail(chain).ess


def mean_ess(archive: ChainArchive) -> float:
    """Reported figure: mean per-chain ESS over the archive."""
    return float(np.mean([ess(archive.chain(k))
                          for k in range(archive.n_chains)]))


def _kde_bandwidths(cloud: np.ndarray) -> np.ndarray:
    n, dim = cloud.shape
    sd = cloud.std(axis=0)
    h = sd * n ** (-1.0 / (dim + 4))
    if np.any(h < KDE_BANDWIDTH_FLOOR):
        log.warning("KDE bandwidth floor engaged (degenerate sample cloud)")
    return np.maximum(h, KDE_BANDWIDTH_FLOOR)


def loo_log_kde(cloud: np.ndarray) -> np.ndarray:
    """Leave-one-out log density of each point under the product-Gaussian
    kernel estimate built from the full (n, D) cloud."""
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    n, dim = cloud.shape
    if n < dim + 2:
        raise ConfigError("KDE needs at least dim + 2 samples")
    h = _kde_bandwidths(cloud)
    z = cloud / h
    sq = np.sum(z * z, axis=1)
    log_norm = -0.5 * dim * np.log(2.0 * np.pi) - np.sum(np.log(h))
    out = np.empty(n)
    block = 512
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * (z[lo:hi] @ z.T)
        d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf   # leave self out
        m = -0.5 * np.maximum(d2, 0.0)
        row_max = m.max(axis=1)
        out[lo:hi] = row_max + np.log(np.sum(np.exp(m - row_max[:, None]),
                                             axis=1))
    return out + log_norm - np.log(n - 1)


def neg_elbo(archive: ChainArchive, target=None, max_points: int = 4096
             ) -> float:
    """Mean archived energy plus mean leave-one-out log KDE density.

    Up to ``max_points`` pooled samples (deterministic stride) enter the
    density estimate; the energy term always covers every archived sample
    (recomputed through ``target`` when one is supplied).
    """
    archive.validate()
    if target is not None:
        energy = float(np.mean(target.potential_batch(archive.pooled)))
    else:
        energy = float(np.mean(archive.energies))
    cloud = archive.pooled
    if cloud.shape[0] > max_points:
        stride = -(-cloud.shape[0] // max_points)
        cloud = cloud[::stride]
    return energy + float(np.mean(loo_log_kde(cloud)))


def report_rows(archive: ChainArchive, include_elbo: bool = True
                ) -> tuple[list[str], list[list]]:
    """Per-chain diagnostic rows plus one summary row for the CSV report."""
    header = ["chain", "ess", "truncation_lag", "neg_elbo",
              "wall_time_s", "ess_per_hour"]
    details = [ess_detail(archive.chain(k)) for k in range(archive.n_chains)]
    rows: list[list] = [[k, d.ess, d.truncation_lag, "", "", ""]
                        for k, d in enumerate(details)]
    mean = float(np.mean([d.ess for d in details]))
    hours = archive.runtime_s / 3600.0
    ess_per_h = mean / hours if hours > 0 else float("nan")
    kld = neg_elbo(archive) if include_elbo else float("nan")
    rows.append(["summary", mean, "", kld, archive.runtime_s, ess_per_h])
    return header, rows
