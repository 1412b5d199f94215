"""Lock-step multi-chain driver wiring estimation, rotation, and stepping.

All chains advance together.  Each step: evaluate the potential in the
physical frame, flag non-converged chains against the running energy
minimum, mitigate runaway momenta, update the energy moment tracker,
update the mean / principal-direction / variance estimators on the
converged subset (directions shadow-tracked before the rotation start,
actively re-expressing states afterwards), then advance every chain with
the strategy-driven update.  Coordinate states are stored as coefficients
in the current frame; the physical point is P @ theta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (LAMBDA_INIT, LAMBDA_RESTART, RelaxationState,
                       apply_divergence_mitigation, chain_step)
from .errors import ConfigError, DivergenceAbort
from .moments import (DecaySchedule, EnergyMomentTracker, MomentTracker,
                      beta1_of, beta2_of, t_hat_at)
from .pcd import RotationFrame, pcd_step
from .rng import stream
from .strategy import StrategyParams
from .strategy import load as load_strategy
from .targets import Target, build_target

DEFAULT_ETA = math.sqrt(0.001)
ADAPT_TAIL = 200      # estimation freezes this many steps before burn-in ends
ABORT_AFTER = 100     # consecutive all-outlier steps tolerated before abort


@dataclass(frozen=True)
class PhaseSchedule:
    """Step indices controlling the run's phases.

    estimate_start <= t < adapt_end is the estimation window; rotation of
    the state space begins at rotate_start; the outlier threshold tightens
    at tighten_at and relaxes again at normal_at, which also ends the
    scale/noise halving; samples are kept strictly after burn_end.
    """

    estimate_start: int = 200
    rotate_start: int = 300
    tighten_at: int = 500
    normal_at: int = 800
    burn_end: int = 3000
    n_steps: int = 9000
    lambda_loose: float = 50.0
    lambda_tight: float = 6.0
    relax_init: float = LAMBDA_INIT
    relax_restart: float = LAMBDA_RESTART

    @property
    def adapt_end(self) -> int:
        return self.burn_end - ADAPT_TAIL

    def validate(self) -> None:
        order = (0, self.estimate_start, self.rotate_start, self.tighten_at,
                 self.normal_at, self.adapt_end, self.burn_end, self.n_steps)
        if any(a >= b for a, b in zip(order, order[1:])):
            raise ConfigError(
                "phase schedule must satisfy 0 < estimate_start < rotate_start"
                " < tighten_at < normal_at < adapt_end < burn_end < n_steps; "
                f"got {order[1:]}"
            )
        if self.lambda_loose <= 0 or self.lambda_tight <= 0:
            raise ConfigError("outlier thresholds must be positive")
        if self.relax_init < self.relax_restart:
            raise ConfigError("relax_init must be >= relax_restart")


@dataclass(frozen=True)
class PhaseFlags:
    estimating: bool
    energy_tracking: bool
    rotating_active: bool
    energy_reduced: bool
    sigma_halved: bool
    lambda_threshold: float
    relax_reset_now: bool


def phase_flags(schedule: PhaseSchedule, t: int) -> PhaseFlags:
    """The flag set governing step ``t`` (0-based).

    Noise reduction runs from the start of the run; spread halving only
    once the estimated spreads are actually applied (rotation start).
    Both end together when normal sampling resumes.
    """
    tight = schedule.tighten_at <= t < schedule.normal_at
    return PhaseFlags(
        estimating=schedule.estimate_start <= t < schedule.adapt_end,
        energy_tracking=t < schedule.adapt_end,
        rotating_active=t >= schedule.rotate_start,
        energy_reduced=t < schedule.normal_at,
        sigma_halved=schedule.rotate_start <= t < schedule.normal_at,
        lambda_threshold=(schedule.lambda_tight if tight
                          else schedule.lambda_loose),
        relax_reset_now=(t == schedule.rotate_start or t == schedule.tighten_at),
    )


def convergence_filter(energies, u_min, var_u, sigma_u, lam):
    """Outlier mask: chain energy above the running minimum by more than
    the tracked variance plus ``lam`` standard deviations.  Non-finite
    energies are always outliers."""
    energies = np.asarray(energies, dtype=float)
    threshold = u_min + var_u + lam * sigma_u
    # explicit finiteness guard: inf <= inf would otherwise pass when no
    # finite energy has been seen yet (threshold still infinite)
    with np.errstate(invalid="ignore"):
        return ~(np.isfinite(energies) & (energies <= threshold))


@dataclass
class RunConfig:
    """Everything needed to reproduce one sampling run."""

    target: object = "gauss2d"            # registry name or config mapping
    n_chains: int = 32
    eta: float = DEFAULT_ETA
    seed: int = 0
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    mean_schedule: DecaySchedule = field(
        default_factory=lambda: DecaySchedule(100, 100, 1000))
    var_schedule: DecaySchedule = field(
        default_factory=lambda: DecaySchedule(200, 200, 1000))
    pcd_schedule: DecaySchedule = field(
        default_factory=lambda: DecaySchedule(600, 600, 1000))
    energy_beta1: float = 0.98
    energy_beta2: float = 0.99
    v0_star: object = 1.0                 # prior variance guess, scalar or per-dim
    pcd_init_scale: str = "sigma"
    sigma_index: int | None = None
    thinning: int = 1
    strategy_source: str = "constant"     # "constant" or a checkpoint path
    rotate: bool = True                   # False: identity-frame ablation

    def validate(self) -> None:
        if self.n_chains < 1:
            raise ConfigError("n_chains must be >= 1")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ConfigError("eta must be positive")
        if self.thinning < 1:
            raise ConfigError("thinning must be >= 1")
        self.schedule.validate()
        v0 = np.asarray(self.v0_star, dtype=float)
        if np.any(v0 <= 0) or not np.all(np.isfinite(v0)):
            raise ConfigError("v0_star must be positive and finite")

    def load_strategy(self) -> StrategyParams:
        if self.strategy_source == "constant":
            return StrategyParams.constant()
        return load_strategy(self.strategy_source, expect_eta=self.eta)


@dataclass
class SampleRun:
    """Output of one run: kept samples plus the state needed to audit them."""

    samples: np.ndarray        # (n_kept, K, D) physical-frame points
    rotated: np.ndarray        # (n_kept, K, D) coefficients in `frame`
    energies: np.ndarray       # (n_kept, K)
    kept_steps: np.ndarray     # (n_kept,) 1-based sample indices
    frame: RotationFrame       # final (frozen) frame
    sigmas: np.ndarray         # final per-direction spread estimates
    mu_u: float
    var_u: float
    history: dict
    config: RunConfig

    @property
    def pooled(self) -> np.ndarray:
        """All kept physical samples flattened to (n_kept * K, D)."""
        return self.samples.reshape(-1, self.samples.shape[-1])


def run(config: RunConfig, target: Target | None = None,
        strategy: StrategyParams | None = None,
        progress=None) -> SampleRun:
    """Execute a full sampling run.

    Raises DivergenceAbort if every chain stays non-converged for
    ABORT_AFTER consecutive steps or the estimator state goes non-finite.
    ``progress``, when given, is called as progress(step, n_steps) every
    few hundred steps.
    """
    config.validate()
    if target is None:
        target = build_target(config.target)
    if strategy is None:
        strategy = config.load_strategy()
    sched = config.schedule
    n_chains, dim = config.n_chains, target.dim
    eta, seed = config.eta, config.seed

    v0 = np.broadcast_to(np.asarray(config.v0_star, dtype=float), (dim,)).copy()
    sigma0 = np.sqrt(v0)

    theta = np.zeros((n_chains, dim))
    p = np.zeros((n_chains, dim))
    frame = RotationFrame.identity(dim, sigma0, sigma_index=config.sigma_index,
                                   init_scale=config.pcd_init_scale)
    tracker = MomentTracker(dim, v0)
    energy = EnergyMomentTracker(dim, n_chains, beta1=config.energy_beta1,
                                 beta2=config.energy_beta2)
    relax = RelaxationState.initial(n_chains, dim, lam0=sched.relax_init)

    # published spreads stay at the prior until rotation starts; the
    # tracker's internal estimate keeps evolving underneath
    sigma_pub = sigma0.copy()
    sigma_int = sigma0.copy()
    rotating = False          # state space rotated into the frame yet?

    u_min = np.inf
    u_prev = np.full(n_chains, np.inf)
    u_prev2 = np.full(n_chains, np.inf)
    grad_prev = np.zeros((n_chains, dim))
    all_outlier_streak = 0
    rotation_norm_drift = 0.0

    n_steps = sched.n_steps
    hist_mu = np.zeros(n_steps)
    hist_var = np.zeros(n_steps)
    hist_umin = np.zeros(n_steps)
    hist_outliers = np.zeros(n_steps, dtype=np.int64)
    hist_sigma = np.zeros((n_steps, dim))

    kept_rot: list[np.ndarray] = []
    kept_steps: list[int] = []
    kept_energy: list[np.ndarray] = []
    pending_energy = False

    def physical(points: np.ndarray) -> np.ndarray:
        return points @ frame.P.T if rotating else points

    for t in range(n_steps):
        if progress is not None and t % 500 == 0:
            progress(t, n_steps)
        w = physical(theta)
        u = target.potential_batch(w)
        u = np.where(np.isfinite(u), u, np.inf)
        if pending_energy:
            kept_energy.append(u.copy())
            pending_energy = False

        flags = phase_flags(sched, t)
        finite_u = u[np.isfinite(u)]
        if finite_u.size:
            u_min = min(u_min, float(finite_u.min()))
        outlier = convergence_filter(u, u_min, energy.var, energy.sigma,
                                     flags.lambda_threshold)

        all_outlier_streak = all_outlier_streak + 1 if outlier.all() else 0
        if all_outlier_streak >= ABORT_AFTER:
            raise DivergenceAbort(
                f"every chain non-converged for {ABORT_AFTER} consecutive "
                f"steps (step {t}, u_min={u_min:.4g}, "
                f"median energy {np.median(u):.4g})"
            )

        if flags.relax_reset_now:
            relax.restart(sched.relax_restart)
        p, _, _ = apply_divergence_mitigation(relax, p, u, u_prev, u_prev2,
                                              grad_prev, outlier)

        if flags.energy_tracking:
            conv_u = u[~outlier]
            if conv_u.size:
                energy.step(conv_u)
        mu_u, var_u = energy.mu, energy.var

        if flags.estimating:
            conv = ~outlier
            if conv.any():
                # estimator clocks run on the global step: the waiting
                # periods of the decay schedules are laid out against the
                # phase boundaries, not against the window start
                b1 = beta1_of(t_hat_at(config.mean_schedule, t))
                b3 = beta1_of(t_hat_at(config.pcd_schedule, t))
                th_mean = t_hat_at(config.mean_schedule, t)
                th_var = t_hat_at(config.var_schedule, t)
                b2 = beta2_of(th_var, n_chains)

                m_hat = tracker.update_mean(w[conv], b1)

                if config.rotate and not rotating and t >= sched.rotate_start:
                    # one-time rotation of the state space into the frame
                    norms = np.linalg.norm(p, axis=1)
                    theta = theta @ frame.P
                    p = p @ frame.P
                    rotating = True
                    rotation_norm_drift = float(
                        np.abs(np.linalg.norm(p, axis=1) - norms).max())

                if config.rotate:
                    coeffs = theta if rotating else theta @ frame.P
                    p_before = frame.P
                    frame, coeffs_new, perm = pcd_step(
                        frame, coeffs, m_hat, b3, sigma_int, stats_mask=conv)
                    if not np.array_equal(perm, np.arange(dim)):
                        # the variance state follows the estimated frame
                        # always; dynamics-frame labels follow only once
                        # rotation is live
                        tracker.permute(perm)
                        if rotating:
                            relax.lam = relax.lam[:, perm]
                            relax.strikes = relax.strikes[:, perm]
                    if rotating:
                        theta = coeffs_new
                        p = p @ (p_before.T @ frame.P)
                else:
                    # ablation: frame pinned to identity, spreads adapt
                    # per physical coordinate
                    coeffs_new = theta

                center = m_hat @ frame.P          # P^T m_hat, row form
                center_prev = tracker.m_hat_prev @ frame.P
                tracker.update_variance(coeffs_new[conv], center, center_prev,
                                        b2, th_mean, th_var, n_chains)
                _, v_hat = tracker.robust_correct()
                sigma_int = np.sqrt(np.maximum(v_hat, 0.0))
                if rotating or (not config.rotate
                                and t >= sched.rotate_start):
                    sigma_pub = sigma_int.copy()

                if not (np.isfinite(tracker.m).all()
                        and np.isfinite(tracker.v).all()
                        and np.isfinite(mu_u) and np.isfinite(var_u)):
                    raise DivergenceAbort(
                        f"estimator state went non-finite at step {t}"
                    )

        hist_mu[t] = mu_u
        hist_var[t] = var_u
        hist_umin[t] = u_min
        hist_outliers[t] = int(outlier.sum())
        hist_sigma[t] = sigma_pub

        # frame updates re-express theta without moving the physical point,
        # so the step-top w is still exact here
        grad_w = target.gradient_batch(w)
        grad = grad_w @ frame.P if rotating else grad_w

        xi = np.empty((n_chains, dim))
        for k in range(n_chains):
            xi[k] = stream(seed, "noise", k, t).standard_normal(dim)

        sigma_floor = np.maximum(sigma_pub, 1e-12)
        res = chain_step(theta, p, u, grad, params=strategy,
                         sigmas=sigma_floor, mu_u=mu_u,
                         sigma_u=math.sqrt(max(var_u, 1e-12)), eta=eta,
                         lam=relax.applied(outlier), xi=xi,
                         half_noise=flags.energy_reduced,
                         half_sigma=flags.sigma_halved)
        theta, p = res.theta, res.p
        grad_prev = grad
        u_prev2, u_prev = u_prev, u

        s = t + 1
        if s > sched.burn_end and (s - sched.burn_end - 1) % config.thinning == 0:
            kept_rot.append(theta.copy())
            kept_steps.append(s)
            pending_energy = True

    if pending_energy:
        u_last = target.potential_batch(physical(theta))
        kept_energy.append(np.where(np.isfinite(u_last), u_last, np.inf))

    rotated = np.asarray(kept_rot)
    samples = rotated @ frame.P.T if rotating else rotated.copy()
    history = {
        "mu_u": hist_mu, "var_u": hist_var, "u_min": hist_umin,
        "outliers": hist_outliers, "sigma": hist_sigma,
        "rotation_norm_drift": rotation_norm_drift,
    }
    return SampleRun(
        samples=samples,
        rotated=rotated,
        energies=np.asarray(kept_energy),
        kept_steps=np.asarray(kept_steps, dtype=np.int64),
        frame=frame.copy(),
        sigmas=sigma_pub.copy(),
        mu_u=float(mu_u),
        var_u=float(var_u),
        history=history,
        config=config,
    )
