"""One discrete step of the preconditioned stochastic-gradient dynamics.

The update pair, applied component-wise with diagonal kinetic scaling G,
friction C, and per-component relaxation factors lambda:

    p'  = (1 - eta*lam*C) p - eta*lam*G grad_U
          + eta*lam*(dG/dU_hat * grad_U_hat + dC/dp)
          + sqrt(2*eta) * sqrt(lam) * eps,      eps ~ N(0, C)
    th' = th + eta*lam*G_hat p' - eta*lam*dG_hat/dp

where G_hat and its momentum derivative are re-evaluated at the half-updated
state (th, p').  There is a single code path: lam = 1 multiplies through
exactly, so relaxed and unrelaxed updates agree bit for bit.

Divergence mitigation operates between steps, gated on the caller's
non-convergence flags: a chain-level energy jump zeroes the full momentum
and relaxes every component; a component moving fast uphill is zeroed and
struck, with its relaxation reduced every third cumulative strike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .strategy import StrategyParams, evaluate

LAMBDA_MIN = 1.0 / 3.0
RELAX_GAMMA = 0.8
LAMBDA_INIT = 10.0
LAMBDA_RESTART = 3.0
CHAIN_JUMP_SCALE = 10.0
COMPONENT_SPEED_LIMIT = 5.0
STRIKE_PERIOD = 3


def momentum_update(p, grad_u, g_diag, c_diag, correction, noise, eta, lam=1.0):
    """Advance momentum one step.  All array arguments broadcast together.

    `noise` is the pre-scaled Gaussian draw with per-component variance
    C_ii (already halved by the caller during the energy-reduction phase);
    this routine applies only the sqrt(2*eta)*sqrt(lam) factor.
    """
    el = eta * np.asarray(lam, dtype=float)
    return (
        (1.0 - el * c_diag) * p
        - el * (g_diag * grad_u)
        + el * correction
        + np.sqrt(2.0 * eta) * np.sqrt(np.asarray(lam, dtype=float)) * noise
    )


def position_update(theta, p_new, g_hat_diag, dg_dp_hat, eta, lam=1.0):
    """Advance position using the already-updated momentum.

    `g_hat_diag` and `dg_dp_hat` must come from a re-evaluation of G at
    (theta, p_new), not at the pre-step state.
    """
    el = eta * np.asarray(lam, dtype=float)
    return theta + el * (g_hat_diag * p_new) - el * dg_dp_hat


def chain_divergence_check(u_t, u_prev, u_prev2, dim):
    """True where a chain shows an energy jump trending upward.

    Fires iff U_t - U_{t-1} > 10*sqrt(D/2) and U_t > U_{t-2}.  Callers
    without two trailing energies should pass +inf placeholders, which
    can never fire.
    """
    threshold = CHAIN_JUMP_SCALE * np.sqrt(dim / 2.0)
    with np.errstate(invalid="ignore"):
        return (np.asarray(u_t) - np.asarray(u_prev) > threshold) & (
            np.asarray(u_t) > np.asarray(u_prev2)
        )


def component_divergence_check(p, grad_prev):
    """True where a component moves fast against the previous gradient.

    Fires iff |p_i| > 5 and p_i * grad_prev_i > 0 (climbing the stored
    last-step gradient at speed).
    """
    p = np.asarray(p)
    return (np.abs(p) > COMPONENT_SPEED_LIMIT) & (p * np.asarray(grad_prev) > 0.0)


def relax_reduce(lam, lambda_min=LAMBDA_MIN, gamma=RELAX_GAMMA):
    """Contract relaxation factors toward the floor: min * (lam/min)**gamma."""
    lam = np.asarray(lam, dtype=float)
    return lambda_min * (lam / lambda_min) ** gamma


@dataclass
class RelaxationState:
    """Per-chain, per-component relaxation factors and strike counters."""

    lam: np.ndarray       # (K, D) float, in [lambda_min, initial value]
    strikes: np.ndarray   # (K, D) int, cumulative while non-converged
    lambda_min: float = LAMBDA_MIN
    gamma: float = RELAX_GAMMA

    @classmethod
    def initial(cls, n_chains, dim, lam0=LAMBDA_INIT):
        return cls(
            lam=np.full((n_chains, dim), float(lam0)),
            strikes=np.zeros((n_chains, dim), dtype=np.int64),
        )

    def restart(self, value=LAMBDA_RESTART):
        """Reset every factor to `value`; strike counters are kept."""
        self.lam.fill(float(value))

    def applied(self, outlier):
        """The factors actually entering the update: lam rows for outlier
        chains, exact 1.0 elsewhere."""
        return np.where(np.asarray(outlier, dtype=bool)[:, None], self.lam, 1.0)


def apply_divergence_mitigation(relax, p, u_t, u_prev, u_prev2, grad_prev, outlier):
    """Zero runaway momenta and contract relaxation factors, in place.

    Only chains flagged as outliers are touched.  Both criteria are
    evaluated on the incoming state: a chain-level energy jump zeroes the
    whole momentum row and reduces every factor in it; independently, each
    fast-uphill component is zeroed and its strike counter incremented,
    with a per-component reduction on every STRIKE_PERIOD-th strike.
    Strike counters of currently converged chains reset to zero.

    Returns (p_out, chain_fired, comp_fired); `relax` is mutated.
    """
    p = np.asarray(p, dtype=float)
    outlier = np.asarray(outlier, dtype=bool)
    dim = p.shape[1]

    chain_fired = outlier & chain_divergence_check(u_t, u_prev, u_prev2, dim)
    comp_fired = outlier[:, None] & component_divergence_check(p, grad_prev)

    p_out = p.copy()
    if chain_fired.any():
        p_out[chain_fired, :] = 0.0
        relax.lam[chain_fired, :] = relax_reduce(
            relax.lam[chain_fired, :], relax.lambda_min, relax.gamma
        )
    if comp_fired.any():
        p_out[comp_fired] = 0.0
        relax.strikes[comp_fired] += 1
        third = comp_fired & (relax.strikes % STRIKE_PERIOD == 0)
        if third.any():
            relax.lam[third] = relax_reduce(
                relax.lam[third], relax.lambda_min, relax.gamma
            )
    relax.strikes[~outlier, :] = 0
    return p_out, chain_fired, comp_fired


@dataclass
class StepResult:
    """Everything produced by one batched step, kept for reuse downstream.

    The strategy evaluation dictionaries are retained because the training
    loop back-propagates through them, and the sampler reuses G/C summaries
    for diagnostics.  `noise` is the variance-C draw actually injected
    (post halving), `xi` the underlying standard-normal draw.
    """

    theta: np.ndarray
    p: np.ndarray
    diverged: np.ndarray
    u_hat: np.ndarray
    grad_hat: np.ndarray
    g_star: np.ndarray
    sigmas_eff: np.ndarray
    noise: np.ndarray
    xi: np.ndarray
    eval_t: dict
    eval_hat: dict


def chain_step(theta, p, u, grad_u, *, params, sigmas, mu_u, sigma_u, eta,
               lam=1.0, xi=None, half_noise=False, half_sigma=False):
    """Advance a (K, D) batch of chains by one step.

    `u` and `grad_u` are the potential and its gradient at `theta` in the
    current coordinate frame; `sigmas` the per-coordinate spread estimates;
    (`mu_u`, `sigma_u`) the energy moment estimates used to normalize the
    strategy inputs.  `half_noise` halves the injected noise (energy
    reduction, active from the start of burn-in); `half_sigma` halves the
    spreads fed to the strategy (active once estimated spreads are applied).
    `xi` is the standard-normal draw, or None for noiseless stepping.

    Non-finite results flag the chain as diverged, zero its momentum, and
    keep its previous position.
    """
    theta = np.asarray(theta, dtype=float)
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    grad_u = np.asarray(grad_u, dtype=float)
    if theta.ndim != 2 or p.shape != theta.shape or grad_u.shape != theta.shape:
        raise ConfigError("theta, p and grad_u must share a (chains, dim) shape")
    n_chains, dim = theta.shape
    if u.shape != (n_chains,):
        raise ConfigError("u must be one energy per chain")
    if not isinstance(params, StrategyParams):
        raise ConfigError("params must be a StrategyParams instance")
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.shape != (dim,) or not np.all(sigmas > 0.0):
        raise ConfigError("sigmas must be a positive length-D vector")
    if not (np.isfinite(sigma_u) and sigma_u > 0.0):
        raise ConfigError("sigma_u must be positive and finite")

    sigmas_eff = 0.5 * sigmas if half_sigma else sigmas
    scale = 1.0 / (np.sqrt(2.0 * dim) * sigma_u)
    u_hat = (u - mu_u) * scale
    grad_hat = grad_u * scale
    g_star = sigmas_eff[None, :] * grad_hat

    if xi is None:
        xi = np.zeros_like(p)
    else:
        xi = np.asarray(xi, dtype=float)
        if xi.shape != theta.shape:
            raise ConfigError("xi must match the (chains, dim) shape")

    # non-finite inputs propagate to the divergence flag instead of warning
    with np.errstate(invalid="ignore", over="ignore"):
        ev_t = evaluate(params, u_hat[:, None], p, g_star, sigmas_eff[None, :])
        correction = ev_t["dG_du"] * grad_hat + ev_t["dC_dp"]
        noise = np.sqrt(ev_t["C"]) * xi
        if half_noise:
            noise = 0.5 * noise
        p_new = momentum_update(p, grad_u, ev_t["G"], ev_t["C"], correction,
                                noise, eta, lam)
        ev_hat = evaluate(params, u_hat[:, None], p_new, g_star,
                          sigmas_eff[None, :])
        theta_new = position_update(theta, p_new, ev_hat["G"],
                                    ev_hat["dG_dp"], eta, lam)

    diverged = ~(
        np.isfinite(theta_new).all(axis=1) & np.isfinite(p_new).all(axis=1)
    )
    if diverged.any():
        p_new[diverged, :] = 0.0
        theta_new[diverged, :] = theta[diverged, :]

    return StepResult(
        theta=theta_new, p=p_new, diverged=diverged,
        u_hat=u_hat, grad_hat=grad_hat, g_star=g_star, sigmas_eff=sigmas_eff,
        noise=noise, xi=xi, eval_t=ev_t, eval_hat=ev_hat,
    )
