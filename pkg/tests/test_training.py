"""Training loop, window loss, truncated backprop, and Adam."""

import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from pcsghmc import training as tr
from pcsghmc.dynamics import chain_step
from pcsghmc.errors import ArchiveError, ConfigError, DivergenceAbort
from pcsghmc.moments import DecaySchedule
from pcsghmc.strategy import StrategyParams
from pcsghmc.strategy import load as load_strategy
from pcsghmc.targets import Target, build_target

FLOOR = tr.KDE_BANDWIDTH_FLOOR


def tiny_config(**kw):
    base = dict(
        target="gauss2d-rho0.9", total_chains=6, epochs=1, sub_epochs=2,
        sub_epoch_steps=30, window=15, window_chains=3, seed=3,
        est_first_subs=1, est_subs=2, est_epochs=40,
        mean_schedule=DecaySchedule(10, 10, 100),
        var_schedule=DecaySchedule(50, 10, 200),
    )
    base.update(kw)
    return tr.TrainConfig(**base)


def param_arrays(params):
    out = {}
    for tag, net in (("q", params.q_net), ("d", params.d_net)):
        for name, arr in net.arrays():
            out[f"{tag}.{name}"] = arr.copy()
    return out


def assert_params_equal(a, b):
    pa, pb = param_arrays(a), param_arrays(b)
    for key in pa:
        np.testing.assert_array_equal(pa[key], pb[key], err_msg=key)


# ------------------------------------------------------------ loss_window


class TestLossWindow:
    def test_single_sample_reduces_to_energy_plus_floored_kernel(self):
        theta = np.array([[[0.7, -0.2, 1.4]]])       # T=1, K=1, D=3
        u = np.array([[2.31]])
        du = np.array([[[0.4, -1.0, 0.9]]])
        with pytest.warns(UserWarning, match="bandwidth floored"):
            loss, g = tr.loss_window(theta, u, du, 0)
        # one point: the density collapses to the kernel at zero distance
        expected = 2.31 - 3.0 * math.log(math.sqrt(2.0 * math.pi) * FLOOR)
        assert loss == pytest.approx(expected, rel=1e-12)
        # degenerate cloud contributes no density gradient
        np.testing.assert_allclose(g, du, rtol=1e-12)

    def test_duplicated_chain_leaves_loss_unchanged(self):
        rng = np.random.default_rng(8)
        theta = rng.standard_normal((5, 1, 2))
        u = rng.standard_normal((5, 1))
        du = rng.standard_normal((5, 1, 2))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            single, _ = tr.loss_window(theta, u, du, 1)
            double, _ = tr.loss_window(
                np.repeat(theta, 2, axis=1), np.repeat(u, 2, axis=1),
                np.repeat(du, 2, axis=1), 1)
        assert double == pytest.approx(single, rel=1e-12)

    def test_three_sample_window_matches_direct_evaluation(self):
        # 1-D, K=1, T=3, M=1: scalar reimplementation with explicit kernels
        xs = [0.3, -0.4, 1.1]
        us = [0.9, 1.7, 0.2]
        theta = np.array(xs).reshape(3, 1, 1)
        u = np.array(us).reshape(3, 1)
        du = np.zeros((3, 1, 1))
        loss, _ = tr.loss_window(theta, u, du, 1)

        expected = sum(us) / 3.0
        for s in (2, 3):
            pool = xs[:s]
            mean = sum(pool) / s
            std = math.sqrt(sum((x - mean) ** 2 for x in pool) / s)
            h = max(std * s ** (-1.0 / 5.0), FLOOR)
            y = xs[s - 1]
            dens = sum(
                math.exp(-0.5 * ((y - x) / h) ** 2)
                / (math.sqrt(2.0 * math.pi) * h)
                for x in pool
            ) / s
            expected += math.log(dens) / 2.0
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_total_finite_difference(self):
        # d(loss)/d(theta) must include the energy, kernel-center,
        # evaluation-point, and bandwidth channels together
        target = build_target("gauss2d-rho0.9")
        rng = np.random.default_rng(4)
        theta = rng.standard_normal((4, 3, 2))

        def full_loss(block):
            flat = block.reshape(-1, 2)
            u = target.potential_batch(flat).reshape(4, 3)
            du = target.gradient_batch(flat).reshape(4, 3, 2)
            return tr.loss_window(block, u, du, 1)

        loss0, g = full_loss(theta)
        h = 1e-6
        for idx in np.ndindex(theta.shape):
            pert = theta.copy()
            pert[idx] += h
            lp, _ = full_loss(pert)
            pert[idx] -= 2 * h
            lm, _ = full_loss(pert)
            fd = (lp - lm) / (2 * h)
            assert fd == pytest.approx(g[idx], rel=5e-5, abs=1e-7), idx

    def test_nonfinite_samples_yield_nan_loss(self):
        theta = np.zeros((2, 2, 2))
        theta[1, 0, 1] = np.nan
        loss, g = tr.loss_window(theta, np.zeros((2, 2)), np.zeros((2, 2, 2)), 0)
        assert math.isnan(loss)
        assert np.all(g == 0.0)

    def test_bad_offset_rejected(self):
        theta = np.zeros((2, 1, 1))
        with pytest.raises(ConfigError):
            tr.loss_window(theta, np.zeros((2, 1)), np.zeros((2, 1, 1)), 2)


# ------------------------------------------------- truncated window grads


def _frozen_scenario(n_steps, seed=11, m_q=2.0, m_d=2.0, eta=0.05):
    """Unrolled run plus everything needed to re-step with frozen inputs."""
    target = build_target("gauss2d-rho0.9")
    rng = np.random.default_rng(seed)
    k, dim = 5, 2
    theta = rng.standard_normal((k, dim)) * 0.8
    p = rng.standard_normal((k, dim)) * 0.5
    xis = rng.standard_normal((n_steps, k, dim))
    sigmas = np.array([1.3, 0.7])
    mu_u, sigma_u = 0.9, 1.7
    sel = np.array([0, 2, 3])
    params = StrategyParams.random(5, eta=eta, m_q=m_q, m_d=m_d)

    frozen, records = [], []
    for t in range(n_steps):
        u = target.potential_batch(theta)
        g = target.gradient_batch(theta)
        frozen.append((theta, p, u, g, xis[t]))
        res = chain_step(theta, p, u, g, params=params, sigmas=sigmas,
                         mu_u=mu_u, sigma_u=sigma_u, eta=eta, xi=xis[t])
        records.append(tr.StepRecord(p_old=p, grad_u=g, res=res))
        theta, p = res.theta, res.p
    assert not any(r.res.diverged.any() for r in records)

    def frozen_loss(ps, m_offset):
        block = []
        for (th, pp, u, g, xi) in frozen:
            r = chain_step(th, pp, u, g, params=ps, sigmas=sigmas,
                           mu_u=mu_u, sigma_u=sigma_u, eta=eta, xi=xi)
            block.append(r.theta[sel])
        stacked = np.stack(block)
        flat = stacked.reshape(-1, dim)
        uu = target.potential_batch(flat).reshape(n_steps, sel.size)
        du = target.gradient_batch(flat).reshape(n_steps, sel.size, dim)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            loss, _ = tr.loss_window(stacked, uu, du, m_offset)
        return loss

    def analytic(ps, m_offset):
        stacked = np.stack([r.res.theta[sel] for r in records])
        flat = stacked.reshape(-1, dim)
        uu = target.potential_batch(flat).reshape(n_steps, sel.size)
        du = target.gradient_batch(flat).reshape(n_steps, sel.size, dim)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, g_theta = tr.loss_window(stacked, uu, du, m_offset)
        grads = ps.zero_grads()
        for j, rec in enumerate(records):
            up = np.zeros((k, dim))
            up[sel] = g_theta[j]
            grads.add_(tr.step_backward(ps, rec, up, eta))
        return grads

    return params, frozen_loss, analytic, records


def _sweep_fd(params, loss_fn, grads, coords_per_array, rel, h=1e-6,
              floor=1e-7, rng_seed=99):
    rng = np.random.default_rng(rng_seed)
    checked = 0
    for tag, net, gnet in (("q", params.q_net, grads.q_net),
                           ("d", params.d_net, grads.d_net)):
        for name, arr in net.arrays():
            view = arr.reshape(-1)
            ana = getattr(gnet, name).reshape(-1)
            if coords_per_array >= arr.size:
                picks = range(arr.size)
            else:
                picks = rng.choice(arr.size, coords_per_array, replace=False)
            for i in picks:
                old = float(view[i])
                view[i] = old + h
                lp = loss_fn(params)
                view[i] = old - h
                lm = loss_fn(params)
                view[i] = old
                fd = (lp - lm) / (2 * h)
                assert fd == pytest.approx(float(ana[i]), rel=rel,
                                           abs=floor), f"{tag}.{name}[{i}]"
                checked += 1
    return checked


class TestStepBackward:
    def test_frozen_one_step_window_every_parameter(self):
        params, frozen_loss, analytic, _ = _frozen_scenario(1)
        grads = analytic(params, 0)
        n = _sweep_fd(params, lambda ps: frozen_loss(ps, 0), grads,
                      coords_per_array=10 ** 9, rel=1e-4)
        assert n > 600   # every coordinate of all 24 arrays

    def test_frozen_multi_step_window_sampled_coords(self):
        params, frozen_loss, analytic, _ = _frozen_scenario(4, seed=12)
        grads = analytic(params, 1)
        _sweep_fd(params, lambda ps: frozen_loss(ps, 1), grads,
                  coords_per_array=4, rel=2e-4, rng_seed=7)

    def test_diverged_rows_carry_no_gradient(self):
        params, _, _, records = _frozen_scenario(1)
        rec = records[0]
        rec.res.diverged[:] = False
        up = np.ones_like(rec.res.theta)
        base = tr.step_backward(params, rec, up, 0.05)
        # zero upstream must give exactly zero parameter gradient
        zero = tr.step_backward(params, rec, np.zeros_like(up), 0.05)
        for _, arr in zero.q_net.arrays():
            assert np.all(arr == 0.0)
        for _, arr in zero.d_net.arrays():
            assert np.all(arr == 0.0)
        some = tr.step_backward(params, rec, up * [[1], [0], [1], [0], [1]],
                                0.05)
        assert not np.array_equal(some.q_net.W1, base.q_net.W1)

    def test_gradient_ignores_earlier_window_activations(self):
        # stop-grad: two consecutive windows of one continuous run; the
        # second window's gradient must not read the first window's
        # cached strategy evaluations at all
        target = build_target("gauss2d-rho0.9")
        rng = np.random.default_rng(13)
        k, dim, w = 4, 2, 3
        theta = rng.standard_normal((k, dim)) * 0.5
        p = rng.standard_normal((k, dim)) * 0.5
        params = StrategyParams.random(6, eta=0.05, m_q=2.0, m_d=2.0)
        sigmas = np.ones(dim)
        records = []
        for t in range(2 * w):
            u = target.potential_batch(theta)
            g = target.gradient_batch(theta)
            res = chain_step(theta, p, u, g, params=params, sigmas=sigmas,
                             mu_u=0.5, sigma_u=1.2, eta=0.05,
                             xi=rng.standard_normal((k, dim)))
            records.append(tr.StepRecord(p_old=p, grad_u=g, res=res))
            theta, p = res.theta, res.p

        def window_two_grads():
            block = np.stack([r.res.theta for r in records[w:]])
            flat = block.reshape(-1, dim)
            uu = target.potential_batch(flat).reshape(w, k)
            du = target.gradient_batch(flat).reshape(w, k, dim)
            _, g_theta = tr.loss_window(block, uu, du, 1)
            grads = params.zero_grads()
            for j, rec in enumerate(records[w:]):
                grads.add_(tr.step_backward(params, rec, g_theta[j], 0.05))
            return grads

        base = window_two_grads()
        for rec in records[:w]:       # poison every earlier cache
            for ev in (rec.res.eval_t, rec.res.eval_hat):
                for val in ev.values():
                    if isinstance(val, np.ndarray):
                        val *= 97.0
            rec.grad_u *= -5.0
            rec.p_old += 11.0
        again = window_two_grads()
        for (name, aa), (_, ab) in zip(
            list(base.q_net.arrays()) + list(base.d_net.arrays()),
            list(again.q_net.arrays()) + list(again.d_net.arrays()),
        ):
            np.testing.assert_array_equal(aa, ab, err_msg=name)


# ------------------------------------------------------------------ adam


class TestAdam:
    def test_zero_gradient_leaves_params_bit_unchanged(self):
        params = StrategyParams.random(1)
        before = param_arrays(params)
        state = tr.AdamState.fresh(params)
        active = frozenset(before)
        tr.adam_step(params, params.zero_grads(), state, active, rate=0.002)
        after = param_arrays(params)
        for key in before:
            np.testing.assert_array_equal(before[key], after[key], err_msg=key)

    def test_constant_gradient_approaches_rate_times_sign(self):
        params = StrategyParams.random(2)
        state = tr.AdamState.fresh(params)
        grads = params.zero_grads()
        grads.q_net.W1 += 0.37
        grads.d_net.b3 -= 4.1
        active = frozenset({"q.W1", "d.b3"})
        prev_w1 = params.q_net.W1.copy()
        prev_b3 = params.d_net.b3.copy()
        for _ in range(400):
            prev_w1 = params.q_net.W1.copy()
            prev_b3 = params.d_net.b3.copy()
            tr.adam_step(params, grads, state, active, rate=0.002)
        np.testing.assert_allclose(prev_w1 - params.q_net.W1, 0.002,
                                   rtol=1e-3)
        np.testing.assert_allclose(prev_b3 - params.d_net.b3, -0.002,
                                   rtol=1e-3)

    def test_matches_hand_unrolled_scalar_trace(self):
        params = StrategyParams.random(3)
        state = tr.AdamState.fresh(params)
        gs = [0.5, -1.2, 0.3, 2.0, -0.1]
        trace = []
        for g in gs:
            grads = params.zero_grads()
            grads.q_net.b4 += g
            tr.adam_step(params, grads, state, frozenset({"q.b4"}),
                         rate=0.002)
            trace.append(float(params.q_net.b4))

        x = float(StrategyParams.random(3).q_net.b4)
        m = v = 0.0
        expected = []
        for t, g in enumerate(gs, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1.0 - 0.9 ** t)
            vh = v / (1.0 - 0.999 ** t)
            x -= 0.002 * mh / (math.sqrt(vh) + 1e-8)
            expected.append(x)
        np.testing.assert_allclose(trace, expected, rtol=1e-14)

    def test_inactive_arrays_fully_frozen(self):
        params = StrategyParams.random(4)
        state = tr.AdamState.fresh(params)
        grads = params.zero_grads()
        for _, arr in grads.q_net.arrays():
            arr += 1.0
        for _, arr in grads.d_net.arrays():
            arr += 1.0
        active = tr._active_keys(tr.TrainConfig(), epoch=30, sub=1)  # MLP only
        before = param_arrays(params)
        tr.adam_step(params, grads, state, active, rate=0.002)
        after = param_arrays(params)
        for key in before:
            if key in active:
                assert not np.array_equal(before[key], after[key]), key
                assert state.t[key] == 1
            else:
                np.testing.assert_array_equal(before[key], after[key],
                                              err_msg=key)
                assert state.t[key] == 0
                name = key.split(".")[1]
                net = state.m.q_net if key[0] == "q" else state.m.d_net
                assert np.all(getattr(net, name) == 0.0)


# ------------------------------------------------------------- schedules


class TestSchedules:
    def test_shortcut_windows(self):
        cfg = tr.TrainConfig()
        on = tr._active_keys(cfg, 1, 1)
        assert "q.rbf_a" in on and "q.lin_w" not in on
        on = tr._active_keys(cfg, 1, 2)
        assert "q.lin_w" in on and "d.lin_w" in on
        on = tr._active_keys(cfg, 25, 10)
        assert "q.rbf_c" in on and "q.lin_w" in on
        on = tr._active_keys(cfg, 26, 10)
        assert "q.rbf_c" not in on and "q.lin_w" not in on
        assert "q.W1" in on and "d.b4" in on   # MLP never gated

    def test_estimator_windows(self):
        cfg = tr.TrainConfig()
        assert not tr._estimators_on(cfg, 1, 5)
        assert tr._estimators_on(cfg, 1, 6)
        assert not tr._estimators_on(cfg, 2, 1)
        assert tr._estimators_on(cfg, 2, 2)
        assert tr._estimators_on(cfg, 40, 10)
        assert not tr._estimators_on(cfg, 41, 10)

    def test_replay_extremes(self):
        cfg = tiny_config(replay_prob=0.0)
        state = tr._fresh_state(cfg, 2)
        state.theta += 3.0
        state.pool_theta = np.full((12, 2), 7.0)
        state.pool_p = np.full((12, 2), -7.0)
        tr._replay_reinit(state, cfg, epoch=2)
        assert np.all(state.theta == 0.0) and np.all(state.p == 0.0)

        cfg = tiny_config(replay_prob=1.0)
        state = tr._fresh_state(cfg, 2)
        pool = np.arange(24.0).reshape(12, 2)
        state.pool_theta = pool
        state.pool_p = -pool
        tr._replay_reinit(state, cfg, epoch=2)
        for row, prow in zip(state.theta, state.p):
            matches = np.where((pool == row).all(axis=1))[0]
            assert matches.size > 0
            np.testing.assert_array_equal(prow, -pool[matches[0]])
        first = state.theta.copy()
        tr._replay_reinit(state, cfg, epoch=2)   # same epoch key: same draw
        np.testing.assert_array_equal(state.theta, first)


# ------------------------------------------------------------- train loop


class TestTrain:
    def test_zero_epochs_returns_initial_params(self):
        cfg = tiny_config(epochs=0)
        result = tr.train(cfg)
        assert result.loss_rows == [] and result.skipped_windows == 0
        fresh = tr._fresh_state(cfg, 2)
        assert_params_equal(result.params, fresh.params)

    def test_zero_learning_rate_keeps_params_bit_identical(self):
        cfg = tiny_config(adam_rate=0.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = tr.train(cfg)
        fresh = tr._fresh_state(cfg, 2)
        assert_params_equal(result.params, fresh.params)
        assert len(result.loss_rows) == 4   # 2 sub-epochs x 2 windows

    def test_loss_rows_and_progress_bookkeeping(self):
        cfg = tiny_config(epochs=2)
        seen = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = tr.train(cfg, progress=lambda d, t: seen.append((d, t)))
        assert seen == [(i, 4) for i in range(4)]
        assert [row[0] for row in result.loss_rows] == list(range(8))
        assert result.total_windows == 8
        finite = [row for row in result.loss_rows if not row[2]]
        assert finite and all(np.isfinite(row[1]) for row in finite)

    def test_training_moves_only_scheduled_arrays(self):
        # epoch beyond both shortcut windows: only the MLP may move
        cfg = tiny_config(rbf_epochs=0, lin_epochs=0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = tr.train(cfg)
        fresh = param_arrays(tr._fresh_state(cfg, 2).params)
        after = param_arrays(result.params)
        for key in fresh:
            name = key.split(".")[1]
            if name.startswith("rbf") or name == "lin_w":
                np.testing.assert_array_equal(fresh[key], after[key],
                                              err_msg=key)
            elif name in ("W1", "w4"):
                assert not np.array_equal(fresh[key], after[key]), key

    def test_split_run_equals_monolithic(self, tmp_path):
        cfg2 = tiny_config(epochs=2, seed=9)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mono = tr.train(cfg2)

            cfg1 = replace(cfg2, epochs=1)
            first = tr.train(cfg1)
            state_path = tmp_path / "state.npz"
            first.save_state(state_path)

            cfg_resume = replace(cfg2, resume_from=str(state_path))
            second = tr.train(cfg_resume)

        assert_params_equal(mono.params, second.params)
        np.testing.assert_array_equal(mono.state.theta, second.state.theta)
        np.testing.assert_array_equal(mono.state.tracker.v,
                                      second.state.tracker.v)
        assert mono.state.energy.t == second.state.energy.t
        for key, t in mono.state.adam.t.items():
            assert second.state.adam.t[key] == t
        half = len(first.loss_rows)
        assert [r[0] for r in second.loss_rows] == \
            [r[0] for r in mono.loss_rows[half:]]
        for (wa, la, sa), (wb, lb, sb) in zip(second.loss_rows,
                                              mono.loss_rows[half:]):
            assert (wa, sa) == (wb, sb) and la == pytest.approx(lb, rel=0,
                                                                abs=0)

    def test_resume_rejects_mismatched_run(self, tmp_path):
        cfg = tiny_config(epochs=1, seed=9)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = tr.train(cfg)
        path = tmp_path / "state.npz"
        result.save_state(path)
        bad = replace(cfg, epochs=2, seed=10, resume_from=str(path))
        with pytest.raises(ConfigError, match="seed"):
            tr.train(bad)
        with pytest.raises(ArchiveError):
            tr.load_training_state(tmp_path / "absent.npz", cfg, 2)

    def test_checkpoint_roundtrip(self, tmp_path):
        cfg = tiny_config()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = tr.train(cfg)
        path = tmp_path / "strategy.ckpt"
        result.save_checkpoint(path)
        back = load_strategy(path)
        assert_params_equal(result.params, back)
        assert back.eta == pytest.approx(cfg.eta)

    def test_all_windows_skipped_aborts(self):
        class NanTarget(Target):
            dim = 2

            def potential_batch(self, w):
                return np.full(len(w), np.nan)

            def gradient_batch(self, w):
                return np.zeros_like(w)

        cfg = tiny_config(est_epochs=0)
        with pytest.raises(DivergenceAbort, match="windows skipped"):
            tr.train(cfg, target=NanTarget())


# ------------------------------------------------------------- config io


class TestConfigIO:
    def test_mapping_roundtrip_with_decay_triples(self):
        tree = {
            "target": "gauss2d-rho0.9", "epochs": 3, "seed": 11,
            "mean_schedule": [100, 100, 1000],
            "var_schedule": {"t_burn": 5000, "t_hat_min": 1000,
                             "t_hat_max": 2000},
        }
        cfg = tr.trainconfig_from_mapping(tree)
        assert cfg.epochs == 3 and cfg.seed == 11
        assert cfg.mean_schedule == DecaySchedule(100, 100, 1000)
        assert cfg.var_schedule == DecaySchedule(5000, 1000, 2000)
        assert cfg.m_resolved == 5    # window 15 default

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown training config"):
            tr.trainconfig_from_mapping({"epochz": 3})

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            tr.trainconfig_from_mapping({"window": 7})    # does not divide 90
        with pytest.raises(ConfigError):
            tr.trainconfig_from_mapping({"replay_prob": 1.5})
        with pytest.raises(ConfigError):
            tr.trainconfig_from_mapping({"window_chains": 65})

    def test_loss_csv_format(self, tmp_path):
        cfg = tiny_config()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = tr.train(cfg)
        path = tmp_path / "loss_trace.csv"
        tr.write_loss_csv(path, result)
        lines = path.read_text().splitlines()
        assert lines[0] == "window,loss,skipped"
        assert len(lines) == 1 + len(result.loss_rows)
        for line, (idx, loss, skip) in zip(lines[1:], result.loss_rows):
            cells = line.split(",")
            assert int(cells[0]) == idx
            if math.isnan(loss):
                assert math.isnan(float(cells[1]))
            else:
                assert float(cells[1]) == pytest.approx(loss, rel=1e-15)
            assert cells[2] == str(int(skip))
