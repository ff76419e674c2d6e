"""Centralized training loop: episode replay, target networks, and the
composite objective

    total = TD + lambda * sum_ij mean-over-valid-steps KL_ij

where the TD term is the squared error against a periodically-copied target
network's max bootstrap, and the KL matrix is the awareness learning loss.
One awareness noise draw per step is shared between the value path and the
KL path.  Everything is driven by explicit RNG streams derived from one
master seed, so a run is bitwise reproducible in single-threaded mode.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import awareness, diffcore as d, mixer as mixmod
from .agent import AgentSpec, Policy, init_agent_params, local_q, trajectory_update
from .config import RunConfig, TrainingConfig
from .env import ForagingEnv
from .errors import ContractViolation, NumericError
from .replay import EpisodeRecord, ReplayBuffer, stack_batch

CSV_COLUMNS = ("env_steps", "episode", "td_loss", "kl_sum", "total_loss",
               "epsilon", "eval_mean_return", "eval_std")


@dataclass
class LossBreakdown:
    """The logged decomposition of one optimization step."""

    td_loss: float
    kl_matrix: np.ndarray     # [n, n] per-pair mean KL
    kl_weight: float
    total: float

    @property
    def kl_sum(self) -> float:
        return float(np.sum(self.kl_matrix))

    def arithmetic_holds(self) -> bool:
        """total must equal td + weight * kl_sum to the last bit."""
        return self.total == float(np.float64(self.td_loss)
                                   + np.float64(self.kl_weight) * np.float64(self.kl_sum))


def agent_spec_for(cfg: RunConfig, env: ForagingEnv) -> AgentSpec:
    return AgentSpec(obs_dim=env.obs_dim, n_agents=env.n_agents,
                     n_actions=env.n_actions, hidden_dim=cfg.agent_hidden_dim,
                     aware_dim=cfg.aware_dim, use_awareness=cfg.use_awareness,
                     share_params=cfg.share_params)


def build_params(rng: np.random.Generator, spec: AgentSpec, mix_kind: str,
                 state_dim: int) -> d.ParameterSet:
    ps = d.ParameterSet()
    init_agent_params(ps, rng, spec)
    mixmod.init_mixer_params(ps, rng, mix_kind, spec.n_agents, spec.n_actions,
                             state_dim)
    return ps


def update_target(online: d.ParameterSet, target: d.ParameterSet,
                  episode: int, interval: int) -> bool:
    """Hard-copy online into target every `interval` episodes."""
    if interval > 0 and episode % interval == 0:
        target.copy_from(online)
        return True
    return False


# ---------------------------------------------------------------------------
# Batched forward pass
# ---------------------------------------------------------------------------

def _build_features(batch: dict, spec: AgentSpec) -> np.ndarray:
    """Constant input features per frame: (obs, last-action one-hot[, id]).

    Returns [B, T+1, n, input_dim(without id in per-agent mode)]; the
    caller slices per timestep.
    """
    obs = batch["obs"]                       # [B, T+1, n, D]
    actions = batch["actions"]               # [B, T, n]
    b, frames, n, _ = obs.shape
    n_act = spec.n_actions
    last = np.zeros((b, frames, n, n_act))
    idx = actions[..., None]                 # [B, T, n, 1]
    np.put_along_axis(last[:, 1:], idx, 1.0, axis=-1)
    parts = [obs, last]
    if spec.share_params:
        ids = np.broadcast_to(np.eye(n), (b, frames, n, n))
        parts.append(ids)
    return np.concatenate(parts, axis=-1)


def _pair_indices(b: int, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row gathers mapping trajectory rows (b, i) to pair rows (b, i, j)."""
    base = np.arange(b)[:, None, None] * n
    i = np.arange(n)[None, :, None]
    j = np.arange(n)[None, None, :]
    idx_self = np.broadcast_to(base + i, (b, n, n)).reshape(-1)
    idx_other = np.broadcast_to(base + j, (b, n, n)).reshape(-1)
    eye = np.eye(n)
    onehot = np.concatenate(
        [np.broadcast_to(eye[:, None, :], (n, n, n)),
         np.broadcast_to(eye[None, :, :], (n, n, n))], axis=-1)   # [n, n, 2n]
    pair_onehot = np.tile(onehot.reshape(n * n, 2 * n), (b, 1))
    return idx_self, idx_other, pair_onehot


class _Unroller:
    """Steps the recurrent agent stack over a batch, one frame at a time.

    Works identically for tracked (Var) and raw parameter mappings; the
    shared-parameter mode folds agents into the row dimension, the
    per-agent mode loops over agents.
    """

    def __init__(self, p, spec: AgentSpec, batch_size: int):
        self.p = p
        self.spec = spec
        self.b = batch_size
        n, h = spec.n_agents, spec.hidden_dim
        if spec.share_params:
            self.hidden = np.zeros((batch_size * n, h))
        else:
            self.hidden = [np.zeros((batch_size, h)) for _ in range(n)]
        self.idx_self, self.idx_other, self.pair_onehot = _pair_indices(batch_size, n)
        if spec.share_params:
            self.id_block = np.tile(np.eye(n), (batch_size, 1))
        self._perm = self._pair_perm(batch_size, n)

    @staticmethod
    def _pair_perm(b: int, n: int) -> np.ndarray:
        # maps (i, j, b)-major rows to (b, i, j)-major rows
        src = np.arange(n * n * b).reshape(n, n, b)
        return src.transpose(2, 0, 1).reshape(-1)

    def step(self, feats_t: np.ndarray, noise_t: np.ndarray | None,
             want_posterior: bool):
        """Advance one frame.

        feats_t: [B, n, input_dim]; noise_t: [B, n, n, aware_dim] or None.
        Returns (q_rows [B, n, A], aware (mean, std, samples) or None,
        posterior (mean_q, std_q) pair rows or None); pair rows are ordered
        (b, i, j).
        """
        spec = self.spec
        b, n, dim = self.b, spec.n_agents, spec.aware_dim
        if spec.share_params:
            flat = feats_t.reshape(b * n, -1)
            h = trajectory_update(flat, self.hidden, self.p, "shared")
            self.hidden = h
            tau = h
            aware = post = None
            samples_flat = None
            if spec.use_awareness:
                mean, std = awareness.encode_awareness(
                    tau, self.p, "shared.aware", n, dim, agent_onehot=self.id_block)
                noise = noise_t.reshape(b * n, n, dim)
                c = awareness.sample_awareness(mean, std, noise)
                samples_flat = d.reshape(c, (b * n, n * dim))
                aware = (mean, std, c)
                if want_posterior:
                    tau_i = d.take_rows(tau, self.idx_self)
                    tau_j = d.take_rows(tau, self.idx_other)
                    post = awareness.posterior_estimate(
                        tau_i, tau_j, self.p, "shared.post", self.pair_onehot, dim)
            q = local_q(tau, samples_flat, self.p, "shared")
            q_rows = d.reshape(q, (b, n, spec.n_actions))
            return q_rows, aware, post

        # per-agent parameters: loop agents, then line results up
        q_parts, means, stds = [], [], []
        for i in range(n):
            pre = f"agent{i}"
            h = trajectory_update(feats_t[:, i], self.hidden[i], self.p, pre)
            self.hidden[i] = h
            samples_flat = None
            if spec.use_awareness:
                mean, std = awareness.encode_awareness(
                    h, self.p, pre + ".aware", n, dim, agent_onehot=None)
                c = awareness.sample_awareness(mean, std, noise_t[:, i])
                samples_flat = d.reshape(c, (b, n * dim))
                means.append(mean)
                stds.append(std)
            q_parts.append(d.reshape(
                local_q(h, samples_flat, self.p, pre), (b, 1, spec.n_actions)))
        q_rows = d.concat(q_parts, axis=1)
        aware = post = None
        if spec.use_awareness:
            aware = (self._pair_rows(means), self._pair_rows(stds), None)
            if want_posterior:
                pm, pstd = [], []
                for i in range(n):
                    for j in range(n):
                        onehot = np.zeros((b, 2 * n))
                        onehot[:, i] = 1.0
                        onehot[:, n + j] = 1.0
                        mq, sq = awareness.posterior_estimate(
                            self.hidden[i], self.hidden[j], self.p,
                            f"agent{i}.post", onehot, dim)
                        pm.append(mq)
                        pstd.append(sq)
                post = (self._interleave(pm), self._interleave(pstd))
        return q_rows, aware, post

    def _pair_rows(self, per_agent_blocks):
        """Per-agent [B, n, dim] encoder outputs -> [B*n*n, dim] pair rows."""
        b, n, dim = self.b, self.spec.n_agents, self.spec.aware_dim
        flat = d.concat([d.reshape(x, (b * n, dim)) for x in per_agent_blocks], axis=0)
        # concat order is (i, b, j); permute to (b, i, j)
        src = np.arange(n * b * n).reshape(n, b, n)
        perm = src.transpose(1, 0, 2).reshape(-1)
        return d.take_rows(flat, perm)

    def _interleave(self, blocks):
        """Pair-major [(i,j) blocks of B rows] -> rows ordered (b, i, j)."""
        b, n = self.b, self.spec.n_agents
        dim = d.val(blocks[0]).shape[-1]
        flat = d.concat(blocks, axis=0)      # [(i, j, b), dim]
        return d.take_rows(flat, self._perm)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def compute_losses(param_vars, target_raw, spec: AgentSpec, mix_kind: str,
                   batch: dict, cfg: TrainingConfig, noise: np.ndarray | None):
    """Full-objective forward pass over one stacked batch.

    Returns (total, td, kl_matrix) as tape Vars (kl_matrix is a zeros array
    when the awareness loss is off).  `noise` is the pinned awareness noise
    [B, T+1, n, n, dim] shared by the online and target paths.
    """
    b, frames = batch["state"].shape[:2]
    t_steps = frames - 1
    n, n_act = spec.n_agents, spec.n_actions
    feats = _build_features(batch, spec)
    mask = batch["mask"]
    want_kl = spec.use_awareness and cfg.kl_weight != 0.0

    online = _Unroller(param_vars, spec, b)
    target = _Unroller(target_raw, spec, b)

    # target pass first: raw numpy, no tape
    target_qtot = []
    for t in range(frames):
        noise_t = noise[:, t] if noise is not None else None
        q_rows, _, _ = target.step(feats[:, t], noise_t, want_posterior=False)
        if t == 0:
            target_qtot.append(None)
            continue
        masked = np.where(batch["avail"][:, t] > 0, q_rows, -1e15)
        target_qtot.append(np.asarray(mixmod.greedy_joint_value(
            mix_kind, masked, batch["state"][:, t], target_raw)))

    td_acc = None
    kl_means, kl_stds, kl_qmeans, kl_qstds, kl_masks = [], [], [], [], []
    for t in range(t_steps):
        noise_t = noise[:, t] if noise is not None else None
        q_rows, aware, post = online.step(feats[:, t], noise_t, want_posterior=want_kl)
        chosen = d.reshape(d.gather_last(q_rows, batch["actions"][:, t]), (b, n))
        inp = mixmod.MixerInput(
            chosen, q_rows, batch["state"][:, t],
            mixmod.actions_onehot(batch["actions"][:, t], n_act))
        q_tot = mixmod.mix(mix_kind, inp, param_vars)
        y = batch["reward"][:, t] + cfg.gamma * (1.0 - batch["terminated"][:, t]) \
            * target_qtot[t + 1]
        err = d.sub(q_tot, y)
        term = d.vsum(d.mul(d.square(err), mask[:, t]))
        td_acc = term if td_acc is None else d.add(td_acc, term)
        if want_kl:
            mean_rows, std_rows = aware[0], aware[1]
            kl_means.append(d.reshape(mean_rows, (b * n * n, spec.aware_dim)))
            kl_stds.append(d.reshape(std_rows, (b * n * n, spec.aware_dim)))
            kl_qmeans.append(post[0])
            kl_qstds.append(post[1])
            kl_masks.append(mask[:, t])

    denom = float(np.sum(mask[:, :t_steps]))
    if denom == 0:
        raise ContractViolation("batch has no valid timesteps")
    td = d.mul(td_acc, 1.0 / denom)

    if want_kl:
        kl_sum, kl_matrix = awareness.awareness_learning_loss(
            kl_means, kl_stds, kl_qmeans, kl_qstds, n, mask=kl_masks)
        total = d.add(td, d.mul(cfg.kl_weight, kl_sum))
    else:
        kl_matrix = np.zeros((n, n))
        total = d.add(td, np.float64(cfg.kl_weight) * np.float64(0.0))
    return total, td, kl_matrix


def train_step(params: d.ParameterSet, target_params: d.ParameterSet,
               opt_state: d.OptimizerState, spec: AgentSpec, mix_kind: str,
               records: list[EpisodeRecord], cfg: TrainingConfig,
               noise_rng: np.random.Generator | None,
               pinned_noise: np.ndarray | None = None) -> LossBreakdown:
    """One optimization step on a batch of episodes.

    Awareness noise is drawn once here and shared by the value and KL paths;
    tests may pin it via `pinned_noise`.
    """
    batch = stack_batch(records)
    b, frames = batch["state"].shape[:2]
    noise = None
    if spec.use_awareness:
        shape = (b, frames, spec.n_agents, spec.n_agents, spec.aware_dim)
        if pinned_noise is not None:
            if pinned_noise.shape != shape:
                raise ContractViolation(f"pinned noise must have shape {shape}")
            noise = pinned_noise
        else:
            noise = noise_rng.standard_normal(shape)

    param_vars = params.as_vars()
    total, td, kl_matrix = compute_losses(
        param_vars, target_params.raw(), spec, mix_kind, batch, cfg, noise)
    total_val = float(d.val(total))
    if not np.isfinite(total_val):
        raise NumericError(f"non-finite loss: td={float(d.val(td))}")
    d.backward(total)
    tape = d.collect_gradients(param_vars, params)
    d.optimizer_step(params, tape, opt_state)
    return LossBreakdown(td_loss=float(d.val(td)),
                         kl_matrix=np.array(d.val(kl_matrix)),
                         kl_weight=cfg.kl_weight, total=total_val)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def collect_episode(env: ForagingEnv, policies: list[Policy],
                    action_rng: np.random.Generator, cfg: TrainingConfig,
                    env_steps_so_far: int,
                    greedy: bool = False) -> tuple[EpisodeRecord, float]:
    """Run one episode; epsilon follows the linear schedule unless greedy."""
    limit = env.config.episode_limit
    n, n_act = env.n_agents, env.n_actions
    obs_arr = np.zeros((limit + 1, n, env.obs_dim))
    state_arr = np.zeros((limit + 1, env.state_dim))
    avail_arr = np.ones((limit + 1, n, n_act))
    actions_arr = np.zeros((limit, n), dtype=np.int64)
    reward_arr = np.zeros(limit)
    term_arr = np.zeros(limit)
    mask_arr = np.zeros(limit)

    obs, state = env.reset()
    for pol in policies:
        pol.reset()
    t = 0
    ep_return = 0.0
    while True:
        obs_arr[t] = obs
        state_arr[t] = state
        avail = env.avail_actions()
        avail_arr[t] = avail
        eps = 0.0 if greedy else cfg.epsilon_at(env_steps_so_far + t)
        actions = [pol.act(obs[i], avail[i], eps, action_rng)
                   for i, pol in enumerate(policies)]
        obs, state, reward, terminated = env.step(actions)
        actions_arr[t] = actions
        reward_arr[t] = reward
        mask_arr[t] = 1.0
        ep_return += reward
        t += 1
        if terminated:
            # truly terminal only when the goal state is reached; hitting the
            # step limit is truncation and keeps the value bootstrap
            if env.world.all_collected():
                term_arr[t - 1] = 1.0
            break
    obs_arr[t] = obs
    state_arr[t] = state
    record = EpisodeRecord(obs_arr, state_arr, avail_arr, actions_arr,
                           reward_arr, term_arr, mask_arr, t)
    return record, ep_return


def evaluate(params: d.ParameterSet, cfg: RunConfig, n_episodes: int,
             seed_seq: np.random.SeedSequence) -> tuple[float, float, list[float]]:
    """Greedy decentralized rollouts: each agent acts from its own history
    and sampled awareness only; no global state, no posterior estimator."""
    children = seed_seq.spawn(3)
    env_cfg = dataclasses.replace(cfg.env, seed=int(children[0].generate_state(1)[0]))
    env = ForagingEnv(env_cfg)
    spec = agent_spec_for(cfg, env)
    noise_seeds = children[1].spawn(env.n_agents)
    policies = [Policy(params, spec, i, np.random.default_rng(noise_seeds[i]))
                for i in range(env.n_agents)]
    action_rng = np.random.default_rng(children[2])
    returns = []
    with awareness.execution_mode():
        for _ in range(n_episodes):
            _, ep_return = collect_episode(env, policies, action_rng, cfg.train,
                                           0, greedy=True)
            returns.append(ep_return)
    mean = float(np.mean(returns))
    std = float(np.std(returns))
    return mean, std, returns


# ---------------------------------------------------------------------------
# The full run
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


class MetricsWriter:
    """Append-only CSV, flushed per row so interrupted runs keep a valid prefix."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w", buffering=1)
        self._fh.write(",".join(CSV_COLUMNS) + "\n")

    def write_row(self, **kwargs) -> None:
        self._fh.write(",".join(_fmt(kwargs[c]) for c in CSV_COLUMNS) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def write_manifest(out_dir: Path, cfg: RunConfig, master_seed: int) -> Path:
    from . import __version__
    manifest = {
        "config": {k: v for k, v in sorted(cfg.to_flat_dict().items())},
        "master_seed": master_seed,
        "code_version": __version__,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "out_dir": str(out_dir),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def run_training(cfg: RunConfig, out_dir: str | Path,
                 progress: bool = False) -> dict:
    """Train to `total_env_steps`, logging metrics and saving checkpoints.

    Returns a summary with the final evaluation statistics and artifact
    paths.  Deterministic: identical (config, seed) reproduce the metrics
    CSV byte for byte.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master_seed = cfg.train.seed
    write_manifest(out_dir, cfg, master_seed)

    ss = np.random.SeedSequence(master_seed)
    init_ss, env_ss, noise_ss, action_ss, sample_ss, train_noise_ss, eval_ss = ss.spawn(7)

    env_cfg = dataclasses.replace(cfg.env, seed=int(env_ss.generate_state(1)[0]))
    env = ForagingEnv(env_cfg)
    spec = agent_spec_for(cfg, env)
    params = build_params(np.random.default_rng(init_ss), spec, cfg.mixer,
                          env.state_dim)
    target_params = params.snapshot()
    opt_state = d.OptimizerState.for_params(
        params, learning_rate=cfg.train.learning_rate,
        decay=cfg.train.optimizer_decay, epsilon=cfg.train.optimizer_epsilon,
        grad_norm_clip=cfg.train.grad_norm_clip)
    buffer = ReplayBuffer(cfg.train.buffer_capacity)
    policy_noise = noise_ss.spawn(env.n_agents)
    policies = [Policy(params, spec, i, np.random.default_rng(policy_noise[i]))
                for i in range(env.n_agents)]
    action_rng = np.random.default_rng(action_ss)
    sample_rng = np.random.default_rng(sample_ss)
    train_noise_rng = np.random.default_rng(train_noise_ss)

    metrics = MetricsWriter(out_dir / "metrics.csv")
    env_steps = 0
    episode = 0
    last = LossBreakdown(float("nan"), np.full((spec.n_agents,) * 2, np.nan),
                         cfg.train.kl_weight, float("nan"))
    next_eval = 0
    next_checkpoint = cfg.train.checkpoint_interval or None
    summary = {"out_dir": str(out_dir)}

    def do_eval():
        mean, std, _ = evaluate(params, cfg, cfg.train.eval_episodes, eval_ss.spawn(1)[0])
        metrics.write_row(env_steps=env_steps, episode=episode,
                          td_loss=last.td_loss, kl_sum=last.kl_sum,
                          total_loss=last.total,
                          epsilon=cfg.train.epsilon_at(env_steps),
                          eval_mean_return=mean, eval_std=std)
        if progress:
            print(f"[{out_dir.name}] steps={env_steps} episode={episode} "
                  f"eval_return={mean:.3f} td={last.td_loss:.5f}", flush=True)
        return mean, std

    try:
        while env_steps < cfg.train.total_env_steps:
            if env_steps >= next_eval:
                summary["final_eval_mean"], summary["final_eval_std"] = do_eval()
                next_eval += cfg.train.eval_interval
            record, _ = collect_episode(env, policies, action_rng, cfg.train,
                                        env_steps)
            buffer.add(record)
            env_steps += record.length
            episode += 1
            if buffer.can_sample(cfg.train.batch_size):
                records = buffer.sample(cfg.train.batch_size, sample_rng)
                last = train_step(params, target_params, opt_state, spec,
                                  cfg.mixer, records, cfg.train, train_noise_rng)
            update_target(params, target_params, episode,
                          cfg.train.target_update_interval)
            if next_checkpoint is not None and env_steps >= next_checkpoint:
                params.save(out_dir / f"checkpoint_{env_steps:09d}.npz")
                next_checkpoint += cfg.train.checkpoint_interval
        summary["final_eval_mean"], summary["final_eval_std"] = do_eval()
    except NumericError:
        params.save(out_dir / "abort_dump.npz")
        metrics.close()
        raise
    metrics.close()
    params.save(out_dir / "checkpoint_final.npz")
    summary.update(env_steps=env_steps, episodes=episode,
                   metrics_csv=str(out_dir / "metrics.csv"),
                   checkpoint=str(out_dir / "checkpoint_final.npz"))
    return summary
