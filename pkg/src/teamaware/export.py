"""Awareness diagnostics export: embedding dumps and variance time series.

Rolls greedy decentralized episodes from a checkpoint and writes, per
(episode, timestep, observer i, target j):

  * a JSON-lines record with the awareness mean, std, sample, and the noise
    that produced it (`c = mu + sigma * eps` is re-derivable from the dump);
  * a CSV row with the dimension-averaged std (the variance summary);

plus a summary JSON reporting, per target, how often the self-awareness
variance is the smallest across observers.  Plotting happens offline.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import awareness, diffcore as d
from .agent import Policy
from .config import RunConfig
from .env import ForagingEnv
from .trainer import agent_spec_for
from .errors import ConfigurationError


def export_awareness(params: d.ParameterSet, cfg: RunConfig, n_episodes: int,
                     out_dir: str | Path, seed: int = 0) -> dict:
    """Write awareness_dump.jsonl, variance_series.csv, awareness_report.json."""
    if not cfg.use_awareness:
        raise ConfigurationError("awareness export needs agent.use_awareness=true")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    env_ss, noise_ss, action_ss = ss.spawn(3)
    env = ForagingEnv(dataclasses.replace(cfg.env, seed=int(env_ss.generate_state(1)[0])))
    spec = agent_spec_for(cfg, env)
    _check_shapes(params, spec)
    n = env.n_agents
    noise_seeds = noise_ss.spawn(n)
    policies = [Policy(params, spec, i, np.random.default_rng(noise_seeds[i]))
                for i in range(n)]
    action_rng = np.random.default_rng(action_ss)

    dump_path = out_dir / "awareness_dump.jsonl"
    series_path = out_dir / "variance_series.csv"
    n_records = 0
    self_min_counts = np.zeros(n)
    timestep_counts = 0
    entropy_acc = np.zeros((n, n))
    returns = []
    with open(dump_path, "w") as dump, open(series_path, "w") as series:
        series.write("episode,t,observer,target,sigma_bar\n")
        for ep in range(n_episodes):
            obs, _ = env.reset()
            for pol in policies:
                pol.reset()
            t = 0
            ep_return = 0.0
            terminated = False
            while not terminated:
                avail = env.avail_actions()
                actions = []
                sigma_bars = np.zeros((n, n))   # [observer, target]
                for i, pol in enumerate(policies):
                    actions.append(pol.act(obs[i], avail[i], 0.0, action_rng))
                    aw = pol.last_awareness
                    entropy_acc[i] += awareness.awareness_entropy(aw.std)
                    for j in range(n):
                        sigma_bars[i, j] = awareness.variance_summary(aw.std, j)
                        dump.write(json.dumps({
                            "episode": ep, "t": t, "i": i, "j": j,
                            "mu": aw.mean[j].tolist(),
                            "sigma": aw.std[j].tolist(),
                            "c": aw.samples[j].tolist(),
                            "eps": aw.noise[j].tolist(),
                        }) + "\n")
                        series.write(f"{ep},{t},{i},{j},{sigma_bars[i, j]!r}\n")
                        n_records += 1
                for j in range(n):
                    if sigma_bars[j, j] <= np.min(sigma_bars[:, j]):
                        self_min_counts[j] += 1
                timestep_counts += 1
                obs, _, reward, terminated = env.step(actions)
                ep_return += reward
                t += 1
            returns.append(ep_return)

    frac_self_min = (self_min_counts / max(1, timestep_counts)).tolist()
    report = {
        "episodes": n_episodes,
        "timesteps": timestep_counts,
        "records": n_records,
        "mean_return": float(np.mean(returns)),
        # per target j: fraction of timesteps where the self-awareness
        # variance is the minimum over observers (an observational claim,
        # reported rather than asserted)
        "frac_self_variance_is_min": frac_self_min,
        "mean_entropy_per_pair": (entropy_acc / max(1, timestep_counts)).tolist(),
    }
    report_path = out_dir / "awareness_report.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    return {"dump": str(dump_path), "series": str(series_path),
            "report": str(report_path), **report}


def _check_shapes(params: d.ParameterSet, spec) -> None:
    probe = d.ParameterSet()
    from .agent import init_agent_params
    init_agent_params(probe, np.random.default_rng(0), spec)
    for name in probe.names():
        if name not in params:
            raise ConfigurationError(f"checkpoint is missing {name} for this config")
        if params.shape(name) != probe.shape(name):
            raise ConfigurationError(
                f"checkpoint shape mismatch for {name}: "
                f"{params.shape(name)} vs expected {probe.shape(name)}")
