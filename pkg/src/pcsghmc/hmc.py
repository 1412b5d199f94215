"""Plain Hamiltonian Monte Carlo reference sampler.

Standard leapfrog proposals with a Metropolis accept/reject step and an
identity mass matrix.  The step size is auto-halved until a 200-step pilot
accepts between 60% and 90% of proposals; chains start at zero.  Output
uses the same archive format as the adaptive sampler so the comparison
harness treats both uniformly.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .diagnostics import ChainArchive, config_digest
from .errors import ConfigError
from .rng import stream
from .targets import Target

log = logging.getLogger(__name__)

PILOT_STEPS = 200
TUNE_BAND = (0.6, 0.9)
MAX_HALVINGS = 40


@dataclass(frozen=True)
class HmcConfig:
    leapfrog: int = 10
    step: float = 0.2
    n_chains: int = 4
    n_steps: int = 5000
    burn_in: int = 500
    seed: int = 0
    tune: bool = True     # pilot-halve the step before the recorded run

    def validate(self) -> None:
        if self.leapfrog < 1:
            raise ConfigError("leapfrog steps must be >= 1")
        if not (np.isfinite(self.step) and self.step > 0):
            raise ConfigError("step size must be positive")
        if self.n_chains < 1:
            raise ConfigError("n_chains must be >= 1")
        if not 0 <= self.burn_in < self.n_steps:
            raise ConfigError("need 0 <= burn_in < n_steps")


def leapfrog(theta: np.ndarray, p: np.ndarray, step: float, n_steps: int,
             target: Target) -> tuple[np.ndarray, np.ndarray]:
    """Integrate Hamiltonian dynamics for a (K, D) batch; unit mass."""
    theta = np.array(theta, dtype=float)
    p = np.array(p, dtype=float)
    p = p - 0.5 * step * target.gradient_batch(theta)
    for i in range(n_steps):
        theta = theta + step * p
        grad = target.gradient_batch(theta)
        p = p - (step if i < n_steps - 1 else 0.5 * step) * grad
    return theta, p


def _mh_sweep(theta, u, step, config, target, rngs):
    """One joint proposal for all chains; returns updated state and the
    per-chain accept mask."""
    n_chains, dim = theta.shape
    p = np.stack([rngs[k].standard_normal(dim) for k in range(n_chains)])
    theta_new, p_new = leapfrog(theta, p, step, config.leapfrog, target)
    u_new = target.potential_batch(theta_new)
    delta_h = (u_new + 0.5 * np.sum(p_new * p_new, axis=1)
               - u - 0.5 * np.sum(p * p, axis=1))
    log_unif = np.log(np.stack([rngs[k].uniform() for k in range(n_chains)]))
    accept = np.isfinite(u_new) & (log_unif < -delta_h)
    theta = np.where(accept[:, None], theta_new, theta)
    u = np.where(accept, u_new, u)
    return theta, u, accept


def _pilot_tune(config: HmcConfig, target: Target) -> float:
    """Halve the step until the pilot acceptance reaches the target band.

    Halving only raises acceptance, so a pilot that already accepts above
    the band keeps the configured step.
    """
    step = config.step
    for _ in range(MAX_HALVINGS):
        rngs = [stream(config.seed, "hmc-pilot", k)
                for k in range(config.n_chains)]
        theta = np.zeros((config.n_chains, target.dim))
        u = target.potential_batch(theta)
        accepted = 0
        for _ in range(PILOT_STEPS):
            theta, u, acc = _mh_sweep(theta, u, step, config, target, rngs)
            accepted += int(acc.sum())
        rate = accepted / (PILOT_STEPS * config.n_chains)
        if rate >= TUNE_BAND[0]:
            break
        step *= 0.5
    return step


def hmc_run(config: HmcConfig, target: Target) -> ChainArchive:
    config.validate()
    start = time.perf_counter()
    step = _pilot_tune(config, target) if config.tune else config.step

    rngs = [stream(config.seed, "hmc", k) for k in range(config.n_chains)]
    theta = np.zeros((config.n_chains, target.dim))
    u = target.potential_batch(theta)

    kept_theta, kept_u = [], []
    burn_accepts = 0
    total_accepts = 0
    for t in range(config.n_steps):
        theta, u, acc = _mh_sweep(theta, u, step, config, target, rngs)
        n_acc = int(acc.sum())
        total_accepts += n_acc
        if t < config.burn_in:
            burn_accepts += n_acc
        else:
            kept_theta.append(theta.copy())
            kept_u.append(u.copy())

    if config.burn_in > 0:
        burn_rate = burn_accepts / (config.burn_in * config.n_chains)
        if burn_rate < 0.01:
            log.warning(
                "acceptance %.4f below 1%% over burn-in; lower the step "
                "size or enable tuning (pilot halves it into the "
                "60-90%% band)", burn_rate)

    runtime = time.perf_counter() - start
    dim = target.dim
    return ChainArchive(
        samples=np.asarray(kept_theta),
        energies=np.asarray(kept_u),
        kept_steps=np.arange(config.burn_in + 1, config.n_steps + 1,
                             dtype=np.int64),
        frame_p=np.eye(dim),
        sigmas=np.ones(dim),
        seed=config.seed,
        config_hash=config_digest(config),
        method="hmc",
        n_steps=config.n_steps,
        runtime_s=runtime,
        extra={"step": step,
               "acceptance": total_accepts / (config.n_steps
                                              * config.n_chains)},
    )
