"""TD loss, composite objective, target updates, evaluation, determinism."""

import dataclasses

import numpy as np
import numpy.testing as npt
import pytest

from conftest import tiny_spec
from teamaware import awareness, diffcore as d, verify
from teamaware.config import RunConfig, TrainingConfig, parse_config
from teamaware.env import EnvConfig
from teamaware.errors import NumericError
from teamaware.replay import EpisodeRecord, stack_batch
from teamaware.trainer import (LossBreakdown, agent_spec_for, build_params,
                               collect_episode, compute_losses, evaluate,
                               run_training, train_step, update_target)


def zeroed(ps):
    for name in ps.names():
        ps.set_(name, np.zeros(ps.shape(name)))
    return ps


def single_step_record(spec, reward, terminated, state_dim, rng):
    limit = 2
    obs = rng.normal(size=(limit + 1, spec.n_agents, spec.obs_dim))
    state = rng.normal(size=(limit + 1, state_dim))
    avail = np.ones((limit + 1, spec.n_agents, spec.n_actions))
    actions = np.zeros((limit, spec.n_agents), dtype=np.int64)
    reward_arr = np.zeros(limit)
    reward_arr[0] = reward
    term = np.zeros(limit)
    term[0] = terminated
    mask = np.zeros(limit)
    mask[0] = 1.0
    return EpisodeRecord(obs, state, avail, actions, reward_arr, term, mask, 1)


def breakdown_of(records, params, target, spec, cfg, mix_kind="vdn", noise=None):
    batch = stack_batch(records)
    param_vars = params.as_vars()
    total, td, klm = compute_losses(param_vars, target.raw(), spec, mix_kind,
                                    batch, cfg, noise)
    return float(d.val(total)), float(d.val(td)), np.array(d.val(klm))


# ---------------------------------------------------------------------------
# TD loss hand cases
# ---------------------------------------------------------------------------

def test_td_terminal_step_squared_error(rng):
    # terminal, r = 1, Q_tot = 0.5 -> loss (1 - 0.5)^2 = 0.25
    spec = tiny_spec(use_awareness=False)
    params = zeroed(build_params(rng, spec, "vdn", 10))
    params.set_("shared.q2.b", np.full(spec.n_actions, 0.25))  # Q_i = 0.25 each
    target = params.snapshot()
    cfg = TrainingConfig(gamma=0.9, kl_weight=0.0)
    rec = single_step_record(spec, reward=1.0, terminated=1.0, state_dim=10,
                             rng=rng)
    total, td, _ = breakdown_of([rec], params, target, spec, cfg)
    assert td == pytest.approx(0.25, rel=1e-12)


def test_td_exact_bootstrap_match_gives_zero(rng):
    # r = 0, gamma = 0.9, target max Q' = 2.0, online Q = 1.8 -> zero loss
    spec = tiny_spec(use_awareness=False)
    params = zeroed(build_params(rng, spec, "vdn", 10))
    params.set_("shared.q2.b", np.full(spec.n_actions, 0.9))   # Q_tot = 1.8
    target = params.snapshot()
    target.set_("shared.q2.b", np.full(spec.n_actions, 1.0))   # max Q' = 2.0
    cfg = TrainingConfig(gamma=0.9, kl_weight=0.0)
    rec = single_step_record(spec, reward=0.0, terminated=0.0, state_dim=10,
                             rng=rng)
    _, td, _ = breakdown_of([rec], params, target, spec, cfg)
    assert td == pytest.approx(0.0, abs=1e-24)


def test_td_truncation_keeps_bootstrap(rng):
    # same setup but the step is a truncation (terminated stays 0) vs a true
    # terminal: the losses must differ by exactly the bootstrap term
    spec = tiny_spec(use_awareness=False)
    params = zeroed(build_params(rng, spec, "vdn", 10))
    target = params.snapshot()
    target.set_("shared.q2.b", np.full(spec.n_actions, 1.0))
    cfg = TrainingConfig(gamma=0.5, kl_weight=0.0)
    trunc = single_step_record(spec, 0.0, 0.0, 10, np.random.default_rng(3))
    term = single_step_record(spec, 0.0, 1.0, 10, np.random.default_rng(3))
    _, td_trunc, _ = breakdown_of([trunc], params, target, spec, cfg)
    _, td_term, _ = breakdown_of([term], params, target, spec, cfg)
    assert td_trunc == pytest.approx(1.0, rel=1e-12)  # (0.5 * 2.0)^2
    assert td_term == pytest.approx(0.0, abs=1e-24)


# ---------------------------------------------------------------------------
# composite objective
# ---------------------------------------------------------------------------

def tiny_run_cfg(**overrides):
    base = dict(
        env=EnvConfig(grid_height=6, grid_width=6, episode_limit=12),
        train=TrainingConfig(buffer_capacity=24, batch_size=4,
                             target_update_interval=8,
                             epsilon_anneal_steps=400,
                             total_env_steps=900, eval_interval=400,
                             eval_episodes=2, seed=5),
    )
    base.update(overrides)
    return RunConfig(**base).validate()


def test_breakdown_arithmetic_exact_every_mixer(rng):
    spec = tiny_spec()
    records = verify.synthetic_batch(spec, rng, lengths=(3, 2))
    for kind in ("vdn", "qmix", "qplex"):
        params = build_params(rng, spec, kind, records[0].state.shape[-1])
        target = build_params(rng, spec, kind, records[0].state.shape[-1])
        opt = d.OptimizerState.for_params(params)
        cfg = TrainingConfig(kl_weight=0.37)
        out = train_step(params, target, opt, spec, kind, records, cfg,
                         np.random.default_rng(0))
        assert out.arithmetic_holds()
        assert out.kl_matrix.shape == (2, 2)
        assert np.all(out.kl_matrix >= 0)


def test_lambda_zero_ablation_total_is_td(rng):
    spec = tiny_spec()
    records = verify.synthetic_batch(spec, rng, lengths=(3, 2))
    params = build_params(rng, spec, "vdn", records[0].state.shape[-1])
    target = build_params(rng, spec, "vdn", records[0].state.shape[-1])
    opt = d.OptimizerState.for_params(params)
    cfg = TrainingConfig(kl_weight=0.0)
    out = train_step(params, target, opt, spec, "vdn", records, cfg,
                     np.random.default_rng(0))
    assert out.total == out.td_loss
    assert out.kl_sum == 0.0
    assert out.arithmetic_holds()


def test_lambda_zero_still_trains_encoder_through_q_path(rng):
    spec = tiny_spec()
    records = verify.synthetic_batch(spec, rng, lengths=(3, 2))
    batch = stack_batch(records)
    params = build_params(rng, spec, "vdn", batch["state"].shape[-1])
    target = build_params(rng, spec, "vdn", batch["state"].shape[-1])
    cfg = TrainingConfig(kl_weight=0.0)
    noise = np.random.default_rng(1).standard_normal(
        (2, batch["state"].shape[1], 2, 2, spec.aware_dim))
    param_vars = params.as_vars()
    total, _, _ = compute_losses(param_vars, target.raw(), spec, "vdn", batch,
                                 cfg, noise)
    d.backward(total)
    enc_grad = param_vars["shared.aware.h.W"].grad
    post_grad = param_vars["shared.post.h.W"].grad
    assert enc_grad is not None and float(np.abs(enc_grad).max()) > 0
    assert post_grad is None  # posterior skipped entirely when weight is 0


def test_awareness_noise_shared_between_paths(rng):
    # pinned noise: same noise -> identical losses; different noise changes TD
    spec = tiny_spec()
    records = verify.synthetic_batch(spec, rng, lengths=(3, 2))
    batch = stack_batch(records)
    params = build_params(rng, spec, "vdn", batch["state"].shape[-1])
    target = build_params(rng, spec, "vdn", batch["state"].shape[-1])
    cfg = TrainingConfig(kl_weight=0.2)
    shape = (2, batch["state"].shape[1], 2, 2, spec.aware_dim)
    n1 = np.random.default_rng(1).standard_normal(shape)
    n2 = np.random.default_rng(2).standard_normal(shape)

    def losses(noise):
        total, td, klm = compute_losses(params.as_vars(), target.raw(), spec,
                                        "vdn", batch, cfg, noise)
        return float(d.val(total)), float(d.val(td)), np.array(d.val(klm))

    t1a, td1a, kl1a = losses(n1)
    t1b, td1b, kl1b = losses(n1)
    t2, td2, kl2 = losses(n2)
    assert (t1a, td1a) == (t1b, td1b)
    npt.assert_array_equal(kl1a, kl1b)
    assert td1a != td2                     # samples feed the value path
    npt.assert_array_equal(kl1a, kl2)      # but the KL never sees the noise


def test_full_loss_gradcheck_vdn():
    rep = verify.full_loss_gradcheck("vdn", np.random.default_rng(42))
    assert rep.passed, rep.per_array


def test_full_loss_gradcheck_per_agent_params():
    rep = verify.full_loss_gradcheck("vdn", np.random.default_rng(43),
                                     share_params=False)
    assert rep.passed, rep.per_array


def test_one_small_step_decreases_loss_on_same_batch():
    # strict decrease with a small learning rate, 20 random initializations
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        spec = tiny_spec()
        records = verify.synthetic_batch(spec, rng, lengths=(3, 2))
        batch = stack_batch(records)
        params = build_params(rng, spec, "vdn", batch["state"].shape[-1])
        target = build_params(rng, spec, "vdn", batch["state"].shape[-1])
        cfg = TrainingConfig(kl_weight=0.1, learning_rate=1e-6)
        noise = rng.standard_normal((2, batch["state"].shape[1], 2, 2,
                                     spec.aware_dim))
        opt = d.OptimizerState.for_params(params, learning_rate=1e-6)
        before, _, _ = compute_losses(params.as_vars(), target.raw(), spec,
                                      "vdn", batch, cfg, noise)
        out = train_step(params, target, opt, spec, "vdn", records, cfg,
                         None, pinned_noise=noise)
        after, _, _ = compute_losses(params.as_vars(), target.raw(), spec,
                                     "vdn", batch, cfg, noise)
        assert float(d.val(after)) < float(d.val(before)), trial
        assert out.total == pytest.approx(float(d.val(before)), rel=1e-12)


def test_nonfinite_loss_aborts(rng):
    spec = tiny_spec()
    records = verify.synthetic_batch(spec, rng, lengths=(3, 2))
    params = build_params(rng, spec, "vdn", records[0].state.shape[-1])
    params.set_("shared.q2.b", np.full(spec.n_actions, 1e308))
    target = params.snapshot()
    opt = d.OptimizerState.for_params(params)
    with np.errstate(all="ignore"), pytest.raises(NumericError):
        train_step(params, target, opt, spec, "vdn", records,
                   TrainingConfig(kl_weight=0.0), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# target updates
# ---------------------------------------------------------------------------

def test_update_target_hard_copy_complete(rng):
    spec = tiny_spec()
    online = build_params(rng, spec, "qmix", 10)
    target = build_params(np.random.default_rng(99), spec, "qmix", 10)
    assert update_target(online, target, episode=8, interval=4)
    for name in online.names():
        assert np.array_equal(online[name], target[name]), name
    assert "shared.aware.h.W" in online.names()  # encoder is part of the copy


def test_update_target_holds_between_copies(rng):
    spec = tiny_spec()
    online = build_params(rng, spec, "vdn", 10)
    target = online.snapshot()
    frozen = {n: target[n].copy() for n in target.names()}
    online.set_("shared.q2.b", np.ones(spec.n_actions))
    assert not update_target(online, target, episode=3, interval=4)
    for name in frozen:
        assert np.array_equal(target[name], frozen[name])


# ---------------------------------------------------------------------------
# rollouts and evaluation
# ---------------------------------------------------------------------------

def test_collect_episode_marks_truncation_not_terminal():
    cfg = tiny_run_cfg()
    env_cfg = dataclasses.replace(cfg.env, episode_limit=3, seed=2)
    from teamaware.env import ForagingEnv
    from teamaware.agent import Policy
    env = ForagingEnv(env_cfg)
    spec = agent_spec_for(cfg, env)
    params = build_params(np.random.default_rng(0), spec, "vdn", env.state_dim)
    policies = [Policy(params, spec, i, np.random.default_rng(i))
                for i in range(2)]
    rec, _ = collect_episode(env, policies, np.random.default_rng(5),
                             cfg.train, 10**9)  # epsilon floor, greedy-ish
    assert rec.length <= 3
    if not env.world.all_collected():
        assert rec.terminated.sum() == 0.0
    else:
        assert rec.terminated[rec.length - 1] == 1.0


def test_evaluate_returns_in_unit_interval_and_reproducible():
    cfg = tiny_run_cfg()
    from teamaware.env import ForagingEnv
    env = ForagingEnv(cfg.env)
    spec = agent_spec_for(cfg, env)
    params = build_params(np.random.default_rng(0), spec, "vdn", env.state_dim)
    m1, s1, r1 = evaluate(params, cfg, 5, np.random.SeedSequence(12))
    m2, s2, r2 = evaluate(params, cfg, 5, np.random.SeedSequence(12))
    assert r1 == r2
    assert all(0.0 <= r <= 1.0 + 1e-12 for r in r1)


def test_evaluate_ignores_centralized_parameters():
    cfg = tiny_run_cfg()
    from teamaware.env import ForagingEnv
    env = ForagingEnv(cfg.env)
    spec = agent_spec_for(cfg, env)

    def returns(corrupt):
        params = build_params(np.random.default_rng(0), spec, "qmix",
                              env.state_dim)
        if corrupt:
            for name in params.names():
                if ".post." in name or name.startswith("mix."):
                    params.set_(name, np.full(params.shape(name), np.nan))
        cfg2 = dataclasses.replace(cfg, mixer="qmix")
        return evaluate(params, cfg2, 4, np.random.SeedSequence(3))[2]

    assert returns(False) == returns(True)


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

def test_run_training_deterministic_csv(tmp_path):
    cfg = tiny_run_cfg()
    s1 = run_training(cfg, tmp_path / "a")
    s2 = run_training(cfg, tmp_path / "b")
    csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    csv_b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert csv_a == csv_b
    assert s1["final_eval_mean"] == s2["final_eval_mean"]


def test_run_training_artifacts_exist(tmp_path):
    cfg = tiny_run_cfg()
    summary = run_training(cfg, tmp_path / "run")
    out = tmp_path / "run"
    assert (out / "manifest.json").exists()
    assert (out / "metrics.csv").exists()
    assert (out / "checkpoint_final.npz").exists()
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert rows[0].startswith("env_steps,")
    assert len(rows) >= 3  # header + initial eval + final eval
    loaded = d.ParameterSet.load(out / "checkpoint_final.npz")
    assert loaded.names()


def test_loss_breakdown_reconstructable_from_csv(tmp_path):
    cfg = tiny_run_cfg(mixer="vdn")
    run_training(cfg, tmp_path / "run")
    rows = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
    header = rows[0].split(",")
    for line in rows[1:]:
        vals = dict(zip(header, line.split(",")))
        td = float(vals["td_loss"])
        kl = float(vals["kl_sum"])
        total = float(vals["total_loss"])
        if np.isnan(td):
            continue
        assert total == td + cfg.train.kl_weight * kl
