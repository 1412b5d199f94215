"""Trains the strategy networks by unrolling short chain windows.

The trainer simulates a pool of chains with the same per-step update as
the sampler, accumulates a negative-ELBO surrogate loss over fixed-length
windows, and applies Adam at sub-epoch boundaries.  Gradient flow is
truncated at every step: states are treated as constants, so a window's
gradient reaches only the strategy evaluations of its own steps, via
hand-written reverse-mode through the two per-step network calls
(including the noise path, which is reparameterized as sqrt(C) * xi).

Training deliberately omits the sampling-phase machinery: no divergence
mitigation, no relaxation, no noise or spread halving, and the coordinate
frame stays the identity, so spreads adapt per physical coordinate.  The
convergence filter is kept with a fixed threshold to keep runaway chains
out of the estimator updates, and the estimators advance only on their
scheduled sub-epochs.

Chain states are re-initialized at epoch boundaries: each chain is drawn
from a pool of previously recorded states with the replay probability,
and reset to the zero state otherwise.  All randomness is keyed by
absolute indices (step, window, epoch), so resuming from a saved training
state continues bit-for-bit where a monolithic run would have gone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import chain_step
from .errors import ArchiveError, ConfigError, DivergenceAbort
from .moments import (DecaySchedule, EnergyMomentTracker, MomentTracker,
                      beta1_of, beta2_of, t_hat_at)
from .rng import stream
from .sampler import DEFAULT_ETA, convergence_filter
from .strategy import StrategyGrads, StrategyParams, backward
from .strategy import save as save_strategy
from .targets import Target, build_target

KDE_BANDWIDTH_FLOOR = 1e-3
ADAM_EPS = 1e-8
_STATE_VERSION = 1
_MLP_ARRAYS = ("W1", "b1", "W2", "b2", "W3", "b3", "w4", "b4")
_RBF_ARRAYS = ("rbf_c", "rbf_s", "rbf_a")


@dataclass
class TrainConfig:
    """Schedule and hyper-parameters for one training run."""

    target: object = "gauss2d-rho0.9"
    total_chains: int = 64
    epochs: int = 50
    sub_epochs: int = 10
    sub_epoch_steps: int = 90
    window: int = 15                  # steps per backprop window
    window_chains: int = 10           # chains scored per window
    replay_prob: float = 0.6
    adam_rate: float = 0.002
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    m_offset: int | None = None       # None: window // 3
    eta: float = DEFAULT_ETA
    seed: int = 0
    v0_star: object = 1.0
    rbf_epochs: int = 25              # RBF shortcuts accumulate while epoch <= this
    lin_epochs: int = 25
    lin_subs: int = 9                 # ... and sub-epoch within the last this-many
    est_first_subs: int = 5           # estimator sub-epochs in epoch 1
    est_subs: int = 9                 # ... in epochs 2..est_epochs
    est_epochs: int = 40
    mean_schedule: DecaySchedule = field(
        default_factory=lambda: DecaySchedule(100, 100, 1000))
    var_schedule: DecaySchedule = field(
        default_factory=lambda: DecaySchedule(5000, 1000, 2000))
    energy_beta1: float = 0.99
    energy_beta2: float = 0.998
    lambda_threshold: float = 50.0
    max_skip_fraction: float = 0.2
    resume_from: str | None = None
    run_id: str = ""

    @property
    def m_resolved(self) -> int:
        return self.window // 3 if self.m_offset is None else self.m_offset

    def validate(self) -> None:
        if self.total_chains < 1 or self.window_chains < 1:
            raise ConfigError("chain counts must be >= 1")
        if self.window_chains > self.total_chains:
            raise ConfigError("window_chains cannot exceed total_chains")
        if self.epochs < 0 or self.sub_epochs < 1 or self.sub_epoch_steps < 1:
            raise ConfigError("epochs >= 0, sub_epochs and steps >= 1 required")
        if self.window < 1 or self.sub_epoch_steps % self.window != 0:
            raise ConfigError("window must divide sub_epoch_steps")
        if not 0 <= self.m_resolved < self.window:
            raise ConfigError("loss offset must satisfy 0 <= M < window")
        if not 0.0 <= self.replay_prob <= 1.0:
            raise ConfigError("replay_prob must be in [0, 1]")
        if self.adam_rate < 0 or not np.isfinite(self.adam_rate):
            raise ConfigError("adam_rate must be finite and >= 0")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ConfigError("eta must be positive")
        if self.lambda_threshold <= 0:
            raise ConfigError("lambda_threshold must be positive")
        if not 0.0 <= self.max_skip_fraction <= 1.0:
            raise ConfigError("max_skip_fraction must be in [0, 1]")
        for n in (self.rbf_epochs, self.lin_epochs, self.lin_subs,
                  self.est_first_subs, self.est_subs, self.est_epochs):
            if n < 0:
                raise ConfigError("schedule window counts must be >= 0")
        v0 = np.asarray(self.v0_star, dtype=float)
        if np.any(v0 <= 0) or not np.all(np.isfinite(v0)):
            raise ConfigError("v0_star must be positive and finite")


# ----------------------------------------------------------------- loss

def loss_window(theta, energies, energy_grads, m_offset):
    """Window loss and its gradient with respect to every sample.

    ``theta`` is the (T, K, D) block of window samples, ``energies`` and
    ``energy_grads`` the potential and its gradient at each sample.  The
    loss is the mean energy over all T*K samples plus the mean, over
    samples past the offset, of the log kernel-density estimate built
    from the pooled first-s samples of the window (product-Gaussian
    kernels, per-dimension bandwidth = pooled std * s^(-1/(D+4)) with a
    floor).  The scored sample stays in its own estimate; duplicating a
    chain therefore leaves the loss unchanged.  Returns (loss, dL/dtheta).
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 3:
        raise ConfigError("theta must have shape (T, K, D)")
    n_t, n_k, dim = theta.shape
    energies = np.asarray(energies, dtype=float)
    energy_grads = np.asarray(energy_grads, dtype=float)
    if energies.shape != (n_t, n_k) or energy_grads.shape != theta.shape:
        raise ConfigError("energies/energy_grads must match the sample block")
    if not 0 <= m_offset < n_t:
        raise ConfigError("loss offset must satisfy 0 <= M < T")
    if not np.isfinite(theta).all():
        return float("nan"), np.zeros_like(theta)

    loss = float(energies.mean())
    g = energy_grads / (n_t * n_k)
    coef = 1.0 / (n_k * (n_t - m_offset))
    expo = -1.0 / (dim + 4)
    floored = False

    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(m_offset + 1, n_t + 1):
            pool = theta[:s].reshape(s * n_k, dim)
            n = s * n_k
            mean = pool.mean(axis=0)
            std = pool.std(axis=0)
            h_raw = std * s**expo
            h = np.maximum(h_raw, KDE_BANDWIDTH_FLOOR)
            live = h_raw >= KDE_BANDWIDTH_FLOOR
            floored = floored or not live.all()

            y = theta[s - 1]                              # (K, D) scored
            diff = y[:, None, :] - pool[None, :, :]        # (K, n, D)
            q2 = np.sum((diff / h) ** 2, axis=2)
            mx = q2.min(axis=1, keepdims=True)
            se = np.exp(-0.5 * (q2 - mx))
            ssum = se.sum(axis=1)
            log_q = (-0.5 * mx[:, 0] + np.log(ssum) - np.log(n)
                     - np.log(np.sqrt(2.0 * np.pi) * h).sum())
            loss += coef * float(log_q.sum())

            w = se / ssum[:, None]                         # kernel weights
            wd = w[:, :, None] * diff
            g[s - 1] += coef * (-wd.sum(axis=1) / h**2)
            g[:s] += coef * (wd.sum(axis=0) / h**2).reshape(s, n_k, dim)

            # bandwidth channel: h depends on the pooled cloud's std
            dh = (w[:, :, None] * diff**2).sum(axis=(0, 1)) / h**3 - n_k / h
            safe_std = np.where(live & (std > 0), std, 1.0)
            d_std = np.where(live & (std > 0), coef * dh * s**expo, 0.0)
            g[:s] += (d_std * (pool - mean) / (n * safe_std)).reshape(
                s, n_k, dim)

    if floored:
        warnings.warn(
            "window KDE bandwidth floored: samples are degenerate along "
            "some direction",
            stacklevel=2,
        )
    return loss, g


# ------------------------------------------------------- per-step reverse

@dataclass
class StepRecord:
    """Inputs and cached evaluations of one executed chain step."""

    p_old: np.ndarray
    grad_u: np.ndarray
    res: object          # dynamics.StepResult


def step_backward(params: StrategyParams, record: StepRecord,
                  upstream: np.ndarray, eta: float) -> StrategyGrads:
    """Parameter gradient of sum(upstream * theta_new) for one step.

    ``upstream`` is dL/dtheta_new with rows already zeroed for chains
    whose step result was overridden by the divergence guard (their map
    is not the smooth update).  States, energies, spreads and the noise
    draw are constants; gradient enters only through the two strategy
    evaluations, with the noise reparameterized as sqrt(C) * xi.
    """
    res = record.res
    a = np.asarray(upstream, dtype=float)
    up_g_hat = eta * a * res.p
    g_hat, ig_hat = backward(params, res.eval_hat,
                             up_G=up_g_hat, up_dG_dp=-eta * a)
    # adjoint on the updated momentum: direct position term plus the
    # re-evaluation's own momentum dependence
    b = eta * a * res.eval_hat["G"] + ig_hat["p_i"]

    sqrt_c = np.sqrt(res.eval_t["C"])
    g_t, _ = backward(
        params, res.eval_t,
        up_G=-eta * b * record.grad_u,
        up_C=b * (-eta * record.p_old
                  + np.sqrt(2.0 * eta) * res.xi / (2.0 * sqrt_c)),
        up_dG_du=eta * b * res.grad_hat,
        up_dC_dp=eta * b,
    )
    g_hat.add_(g_t)
    return g_hat


# ------------------------------------------------------------------ adam

@dataclass
class AdamState:
    """First/second moments and per-array step counts."""

    m: StrategyGrads
    v: StrategyGrads
    t: dict

    @classmethod
    def fresh(cls, params: StrategyParams) -> "AdamState":
        keys = [f"{tag}.{name}" for tag, net in
                (("q", params.q_net), ("d", params.d_net))
                for name, _ in net.arrays()]
        return cls(m=params.zero_grads(), v=params.zero_grads(),
                   t={k: 0 for k in keys})


def adam_step(params: StrategyParams, grads: StrategyGrads, state: AdamState,
              active, rate: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = ADAM_EPS) -> None:
    """One Adam update in place, restricted to the ``active`` array keys.

    Frozen arrays are skipped entirely: their moments and step counts do
    not advance, so re-entering an accumulation window resumes exactly
    where it left off.
    """
    for tag, net, g_net, m_net, v_net in (
        ("q", params.q_net, grads.q_net, state.m.q_net, state.v.q_net),
        ("d", params.d_net, grads.d_net, state.m.d_net, state.v.d_net),
    ):
        for name, p_arr in net.arrays():
            key = f"{tag}.{name}"
            if key not in active:
                continue
            g = getattr(g_net, name)
            m = getattr(m_net, name)
            v = getattr(v_net, name)
            state.t[key] += 1
            t = state.t[key]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            p_arr -= rate * m_hat / (np.sqrt(v_hat) + eps)


def _active_keys(config: TrainConfig, epoch: int, sub: int) -> frozenset:
    keys = {f"{tag}.{name}" for tag in "qd" for name in _MLP_ARRAYS}
    if epoch <= config.rbf_epochs:
        keys |= {f"{tag}.{name}" for tag in "qd" for name in _RBF_ARRAYS}
    if epoch <= config.lin_epochs and sub > config.sub_epochs - config.lin_subs:
        keys |= {f"{tag}.lin_w" for tag in "qd"}
    return frozenset(keys)


def _estimators_on(config: TrainConfig, epoch: int, sub: int) -> bool:
    if epoch > config.est_epochs:
        return False
    if epoch == 1:
        return sub > config.sub_epochs - config.est_first_subs
    return sub > config.sub_epochs - config.est_subs


# ----------------------------------------------------------------- state

@dataclass
class TrainState:
    """Everything mutable across epochs; serializable for resumption."""

    params: StrategyParams
    adam: AdamState
    theta: np.ndarray
    p: np.ndarray
    pool_theta: np.ndarray
    pool_p: np.ndarray
    tracker: MomentTracker
    energy: EnergyMomentTracker
    u_min: float
    epochs_done: int


def _fresh_state(config: TrainConfig, dim: int) -> TrainState:
    v0 = np.broadcast_to(np.asarray(config.v0_star, dtype=float), (dim,))
    params = StrategyParams.random(
        config.seed, eta=config.eta,
        run_id=config.run_id or f"train{config.seed}")
    return TrainState(
        params=params,
        adam=AdamState.fresh(params),
        theta=np.zeros((config.total_chains, dim)),
        p=np.zeros((config.total_chains, dim)),
        pool_theta=np.zeros((0, dim)),
        pool_p=np.zeros((0, dim)),
        tracker=MomentTracker(dim, v0.copy()),
        energy=EnergyMomentTracker(dim, config.total_chains,
                                   beta1=config.energy_beta1,
                                   beta2=config.energy_beta2),
        u_min=float("inf"),
        epochs_done=0,
    )


def save_training_state(path, state: TrainState, config: TrainConfig) -> None:
    """Write the full mutable training state as an .npz archive."""
    data = {
        "version": np.array([_STATE_VERSION], dtype=np.int64),
        "meta": np.array([config.seed, config.total_chains,
                          state.theta.shape[1], state.epochs_done],
                         dtype=np.int64),
        "u_min": np.array([state.u_min]),
        "run_id": np.array(state.params.run_id),
        "consts": np.array([state.params.c1, state.params.c2,
                            state.params.m_q, state.params.m_d,
                            state.params.eta]),
        "theta": state.theta, "p": state.p,
        "pool_theta": state.pool_theta, "pool_p": state.pool_p,
        "mt_m": state.tracker.m, "mt_v": state.tracker.v,
        "mt_v0": state.tracker.v0_star,
        "mt_pi": np.array([state.tracker.pi1, state.tracker.pi2]),
        "mt_updates": np.array([state.tracker.updates], dtype=np.int64),
        "mt_mhat": state.tracker.m_hat,
        "mt_mhat_prev": state.tracker.m_hat_prev,
        "en": np.array([state.energy.m, state.energy.v,
                        state.energy._m_hat, state.energy._m_hat_prev]),
        "en_t": np.array([state.energy.t], dtype=np.int64),
    }
    order = []
    for tag, net in (("q", state.params.q_net), ("d", state.params.d_net)):
        for name, arr in net.arrays():
            key = f"{tag}.{name}"
            order.append(key)
            data[f"p_{tag}_{name}"] = arr
            data[f"am_{tag}_{name}"] = getattr(
                state.adam.m.q_net if tag == "q" else state.adam.m.d_net, name)
            data[f"av_{tag}_{name}"] = getattr(
                state.adam.v.q_net if tag == "q" else state.adam.v.d_net, name)
    data["adam_t"] = np.array([state.adam.t[k] for k in order], dtype=np.int64)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **data)
    except OSError as exc:
        raise ArchiveError(f"cannot write training state {path}: {exc}") from exc


def load_training_state(path, config: TrainConfig, dim: int) -> TrainState:
    """Rebuild a TrainState saved by ``save_training_state``.

    The saved seed, chain count, and dimension must match the resuming
    config, otherwise continuation would silently diverge from the
    monolithic run it claims to extend.
    """
    try:
        data = np.load(path)
    except OSError as exc:
        raise ArchiveError(f"cannot read training state {path}: {exc}") from exc
    try:
        if int(data["version"][0]) != _STATE_VERSION:
            raise ConfigError(f"{path}: unsupported training-state version")
        seed, k0, sdim, epochs_done = (int(x) for x in data["meta"])
        if seed != config.seed or k0 != config.total_chains or sdim != dim:
            raise ConfigError(
                f"{path}: state was built for seed={seed}, chains={k0}, "
                f"dim={sdim}; resuming config disagrees")
        c1, c2, m_q, m_d, eta = (float(x) for x in data["consts"])
        params = StrategyParams.constant(c1=c1, c2=c2, m_q=m_q, m_d=m_d,
                                         eta=eta,
                                         run_id=str(data["run_id"][()]))
        adam = AdamState.fresh(params)
        order = []
        for tag, net, am, av in (
            ("q", params.q_net, adam.m.q_net, adam.v.q_net),
            ("d", params.d_net, adam.m.d_net, adam.v.d_net),
        ):
            for name, arr in net.arrays():
                order.append(f"{tag}.{name}")
                setattr(net, name, data[f"p_{tag}_{name}"].copy())
                setattr(am, name, data[f"am_{tag}_{name}"].copy())
                setattr(av, name, data[f"av_{tag}_{name}"].copy())
        adam.t = {k: int(t) for k, t in zip(order, data["adam_t"])}

        tracker = MomentTracker(sdim, data["mt_v0"].copy())
        tracker.m = data["mt_m"].copy()
        tracker.v = data["mt_v"].copy()
        tracker.pi1, tracker.pi2 = (float(x) for x in data["mt_pi"])
        tracker.updates = int(data["mt_updates"][0])
        tracker._m_hat = data["mt_mhat"].copy()
        tracker._m_hat_prev = data["mt_mhat_prev"].copy()

        energy = EnergyMomentTracker(sdim, k0, beta1=config.energy_beta1,
                                     beta2=config.energy_beta2)
        en = data["en"]
        energy.m, energy.v = float(en[0]), float(en[1])
        energy._m_hat, energy._m_hat_prev = float(en[2]), float(en[3])
        energy.t = int(data["en_t"][0])

        return TrainState(
            params=params, adam=adam,
            theta=data["theta"].copy(), p=data["p"].copy(),
            pool_theta=data["pool_theta"].copy(),
            pool_p=data["pool_p"].copy(),
            tracker=tracker, energy=energy,
            u_min=float(data["u_min"][0]),
            epochs_done=epochs_done,
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: malformed training state ({exc})") from exc
    finally:
        data.close()


# ------------------------------------------------------------------ loop

@dataclass
class TrainResult:
    """Final parameters plus the loss trace and resumable state."""

    params: StrategyParams
    loss_rows: list          # (window index, loss, skipped flag)
    skipped_windows: int
    total_windows: int
    state: TrainState
    config: TrainConfig

    def save_checkpoint(self, path) -> None:
        save_strategy(self.params, path)

    def save_state(self, path) -> None:
        save_training_state(path, self.state, self.config)


def _replay_reinit(state: TrainState, config: TrainConfig, epoch: int) -> None:
    rng = stream(config.seed, "replay", epoch)
    n_chains = state.theta.shape[0]
    use = rng.random(n_chains) < config.replay_prob
    idx = rng.integers(0, max(len(state.pool_theta), 1), size=n_chains)
    state.theta = np.zeros_like(state.theta)
    state.p = np.zeros_like(state.p)
    if len(state.pool_theta):
        state.theta[use] = state.pool_theta[idx[use]]
        state.p[use] = state.pool_p[idx[use]]


def _advance_step(state: TrainState, config: TrainConfig, target: Target,
                  est_on: bool, t_glob: int, sigma_pub: np.ndarray,
                  records: list) -> np.ndarray:
    """One simulation step; mutates chain and estimator state."""
    u = target.potential_batch(state.theta)
    u = np.where(np.isfinite(u), u, np.inf)
    finite_u = u[np.isfinite(u)]
    if finite_u.size:
        state.u_min = min(state.u_min, float(finite_u.min()))

    if est_on:
        outlier = convergence_filter(u, state.u_min, state.energy.var,
                                     state.energy.sigma,
                                     config.lambda_threshold)
        conv = ~outlier
        if conv.any():
            state.energy.step(u[conv])
            t = max(t_glob, 1)
            th_mean = t_hat_at(config.mean_schedule, t)
            th_var = t_hat_at(config.var_schedule, t)
            b1 = beta1_of(th_mean)
            b2 = beta2_of(th_var, config.total_chains)
            m_hat = state.tracker.update_mean(state.theta[conv], b1)
            state.tracker.update_variance(state.theta[conv], m_hat,
                                          state.tracker.m_hat_prev, b2,
                                          th_mean, th_var,
                                          config.total_chains)
            _, v_hat = state.tracker.robust_correct()
            sigma_pub = np.sqrt(np.maximum(v_hat, 0.0))
            if not (np.isfinite(state.tracker.m).all()
                    and np.isfinite(state.tracker.v).all()
                    and np.isfinite(state.energy.mu)
                    and np.isfinite(state.energy.var)):
                raise DivergenceAbort(
                    f"estimator state went non-finite at training step {t_glob}"
                )

    grad = target.gradient_batch(state.theta)
    xi = stream(config.seed, "noise", t_glob).standard_normal(
        state.theta.shape)
    res = chain_step(
        state.theta, state.p, u, grad, params=state.params,
        sigmas=np.maximum(sigma_pub, 1e-12),
        mu_u=state.energy.mu,
        sigma_u=float(np.sqrt(max(state.energy.var, 1e-12))),
        eta=config.eta, xi=xi)
    records.append(StepRecord(p_old=state.p, grad_u=grad, res=res))
    state.theta, state.p = res.theta, res.p
    return sigma_pub


def _grads_finite(grads: StrategyGrads) -> bool:
    return all(
        np.isfinite(arr).all()
        for net in (grads.q_net, grads.d_net)
        for _, arr in net.arrays()
    )


def _window_grads(state: TrainState, config: TrainConfig, target: Target,
                  records: list, sel: np.ndarray):
    """Loss and accumulated parameter gradient for one window.

    Returns (loss, grads-or-None); None marks the window skipped (loss or
    gradient non-finite, e.g. a chain stuck at an undefined-potential
    point, or an overridden step poisoning a cached evaluation).
    """
    n_t = len(records)
    dim = state.theta.shape[1]
    theta_win = np.stack([rec.res.theta[sel] for rec in records])
    if not np.isfinite(theta_win).all():
        return float("nan"), None
    flat = theta_win.reshape(-1, dim)
    u = target.potential_batch(flat).reshape(n_t, sel.size)
    du = target.gradient_batch(flat).reshape(n_t, sel.size, dim)
    loss, g_theta = loss_window(theta_win, u, du, config.m_resolved)
    if not np.isfinite(loss):
        return loss, None

    grads = state.params.zero_grads()
    with np.errstate(invalid="ignore", over="ignore"):
        for j, rec in enumerate(records):
            up = np.zeros((config.total_chains, dim))
            up[sel] = g_theta[j]
            up[rec.res.diverged] = 0.0
            grads.add_(step_backward(state.params, rec, up, config.eta))
    if not _grads_finite(grads):
        return loss, None
    return loss, grads


def train(config: TrainConfig, target: Target | None = None,
          progress=None) -> TrainResult:
    """Run the training schedule and return the final parameters.

    Raises DivergenceAbort when the cumulative skipped-window fraction
    exceeds ``max_skip_fraction`` or estimator state turns non-finite.
    ``progress``, when given, is called as progress(sub_epoch, total) at
    each sub-epoch boundary.
    """
    config.validate()
    if target is None:
        target = build_target(config.target)
    dim = target.dim

    if config.resume_from:
        state = load_training_state(config.resume_from, config, dim)
        if state.epochs_done > config.epochs:
            raise ConfigError(
                f"state already covers {state.epochs_done} epochs; "
                f"config asks for {config.epochs}")
    else:
        state = _fresh_state(config, dim)

    v0 = np.broadcast_to(np.asarray(config.v0_star, dtype=float), (dim,))
    if state.tracker.updates > 0:
        _, v_hat = state.tracker.robust_correct()
        sigma_pub = np.sqrt(np.maximum(v_hat, 0.0))
    else:
        sigma_pub = np.sqrt(v0).copy()

    wps = config.sub_epoch_steps // config.window
    total_subs = config.epochs * config.sub_epochs
    loss_rows: list = []
    skipped = 0
    done = 0

    for epoch in range(state.epochs_done + 1, config.epochs + 1):
        if epoch > 1:
            _replay_reinit(state, config, epoch)
        for sub in range(1, config.sub_epochs + 1):
            sub_abs = (epoch - 1) * config.sub_epochs + sub - 1
            if progress is not None:
                progress(sub_abs, total_subs)
            est_on = _estimators_on(config, epoch, sub)
            active = _active_keys(config, epoch, sub)
            grads = state.params.zero_grads()
            for w in range(wps):
                records: list = []
                for j in range(config.window):
                    t_glob = (sub_abs * config.sub_epoch_steps
                              + w * config.window + j)
                    sigma_pub = _advance_step(state, config, target, est_on,
                                              t_glob, sigma_pub, records)
                w_abs = sub_abs * wps + w
                sel = stream(config.seed, "select", w_abs).choice(
                    config.total_chains, size=config.window_chains,
                    replace=False)
                loss, g_win = _window_grads(state, config, target, records,
                                            sel)
                if g_win is None:
                    skipped += 1
                else:
                    grads.add_(g_win)
                loss_rows.append((w_abs, float(loss), g_win is None))
                done += 1
            adam_step(state.params, grads, state.adam, active,
                      rate=config.adam_rate, beta1=config.adam_beta1,
                      beta2=config.adam_beta2)
            if skipped > config.max_skip_fraction * done:
                raise DivergenceAbort(
                    f"{skipped}/{done} training windows skipped "
                    f"(> {config.max_skip_fraction:.0%}); chains are not "
                    "producing usable losses")
            state.pool_theta = np.concatenate([state.pool_theta, state.theta])
            state.pool_p = np.concatenate([state.pool_p, state.p])
        state.epochs_done = epoch

    return TrainResult(params=state.params, loss_rows=loss_rows,
                       skipped_windows=skipped, total_windows=done,
                       state=state, config=config)


# ------------------------------------------------------------------ io

_TRAIN_KEYS = (
    "target", "total_chains", "epochs", "sub_epochs", "sub_epoch_steps",
    "window", "window_chains", "replay_prob", "adam_rate", "adam_beta1",
    "adam_beta2", "m_offset", "eta", "seed", "v0_star", "rbf_epochs",
    "lin_epochs", "lin_subs", "est_first_subs", "est_subs", "est_epochs",
    "mean_schedule", "var_schedule", "energy_beta1", "energy_beta2",
    "lambda_threshold", "max_skip_fraction", "resume_from", "run_id",
)


def _decay_from(value) -> DecaySchedule:
    if isinstance(value, DecaySchedule):
        return value
    if isinstance(value, (list, tuple)) and len(value) == 3:
        return DecaySchedule(*(int(v) for v in value))
    if isinstance(value, dict):
        extra = set(value) - {"t_burn", "t_hat_min", "t_hat_max"}
        if extra:
            raise ConfigError(f"unknown decay schedule keys: {sorted(extra)}")
        return DecaySchedule(**{k: int(v) for k, v in value.items()})
    raise ConfigError(f"cannot interpret decay schedule from {value!r}")


def trainconfig_from_mapping(tree) -> TrainConfig:
    """Build a TrainConfig from a plain config mapping."""
    if not isinstance(tree, dict):
        raise ConfigError("training config must be a mapping")
    unknown = set(tree) - set(_TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    kw = dict(tree)
    for key in ("mean_schedule", "var_schedule"):
        if key in kw:
            kw[key] = _decay_from(kw[key])
    config = TrainConfig(**kw)
    config.validate()
    return config


def write_loss_csv(path, result: TrainResult) -> None:
    """Loss trace: one row per window, in execution order."""
    lines = ["window,loss,skipped"]
    for idx, loss, skip in result.loss_rows:
        lines.append(f"{idx},{format(loss, '.17g')},{int(skip)}")
    try:
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ArchiveError(f"cannot write loss trace {path}: {exc}") from exc
