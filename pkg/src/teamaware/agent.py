"""Per-agent recurrent utility network and the decentralized executor.

Each agent encodes (observation, last action) into a recurrent trajectory
embedding, optionally concatenates its sampled awareness of every teammate,
and maps the result to per-action utilities.  The `Policy` class is the
execution-time surface: it is constructed from the agent-local parameter
subset only, so by construction it cannot read other agents' trajectories,
the global state, the mixer, or the posterior estimator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import awareness, diffcore as d
from .errors import ConfigurationError, ContractViolation


@dataclass
class TrajectoryState:
    """Recurrent hidden embedding of one agent's observation-action history."""

    hidden: np.ndarray
    agent_id: int
    t: int = 0


@dataclass
class LocalQValues:
    values: np.ndarray        # [n_actions]
    avail: np.ndarray         # [n_actions] 0/1 mask

    def masked(self) -> np.ndarray:
        out = self.values.copy()
        out[self.avail <= 0] = -np.inf
        return out


@dataclass(frozen=True)
class AgentSpec:
    """Shapes of the per-agent networks (shared or per-agent parameters)."""

    obs_dim: int
    n_agents: int
    n_actions: int
    hidden_dim: int = 64
    aware_dim: int = 3
    aware_hidden_dim: int = 64
    use_awareness: bool = True
    share_params: bool = True

    @property
    def input_dim(self) -> int:
        # observation + last-action one-hot (+ agent one-hot when shared)
        return self.obs_dim + self.n_actions + (self.n_agents if self.share_params else 0)

    @property
    def q_input_dim(self) -> int:
        extra = self.n_agents * self.aware_dim if self.use_awareness else 0
        return self.hidden_dim + extra

    def prefix(self, agent_id: int) -> str:
        return "shared" if self.share_params else f"agent{agent_id}"


def init_agent_params(ps: d.ParameterSet, rng: np.random.Generator,
                      spec: AgentSpec) -> None:
    """All per-agent networks: input dense, recurrent cell, utility head,
    awareness encoder, and posterior estimator."""
    prefixes = ["shared"] if spec.share_params else [
        f"agent{i}" for i in range(spec.n_agents)]
    for pre in prefixes:
        d.init_dense(ps, rng, f"{pre}.in", spec.input_dim, spec.hidden_dim)
        d.init_gru(ps, rng, f"{pre}.gru", spec.hidden_dim, spec.hidden_dim)
        d.init_dense(ps, rng, f"{pre}.q1", spec.q_input_dim, spec.hidden_dim)
        d.init_dense(ps, rng, f"{pre}.q2", spec.hidden_dim, spec.n_actions)
        if spec.use_awareness:
            awareness.init_encoder_params(
                ps, rng, f"{pre}.aware", spec.hidden_dim, spec.n_agents,
                spec.aware_dim, hidden=spec.aware_hidden_dim,
                id_conditioned=spec.share_params)
            awareness.init_posterior_params(
                ps, rng, f"{pre}.post", spec.hidden_dim, spec.n_agents,
                spec.aware_dim, hidden=spec.aware_hidden_dim)


def trajectory_update(obs_in, prev_hidden, p: Mapping, prefix: str):
    """(obs, last action, agent id) features -> dense -> ReLU -> GRU step."""
    x = d.relu(d.dense_forward(obs_in, p[prefix + ".in.W"], p[prefix + ".in.b"]))
    return d.gru_step(x, prev_hidden, d.gru_cell_params(p, prefix + ".gru"))


def local_q(traj, aware_samples, p: Mapping, prefix: str):
    """Utilities from the trajectory plus flattened awareness samples.

    `aware_samples` is [rows, n_agents * aware_dim] or None when the
    awareness pathway is disabled.
    """
    inp = traj if aware_samples is None else d.concat([traj, aware_samples])
    if d.val(inp).shape[-1] != d.val(p[prefix + ".q1.W"]).shape[0]:
        raise ConfigurationError("utility head input width mismatch")
    h = d.relu(d.dense_forward(inp, p[prefix + ".q1.W"], p[prefix + ".q1.b"]))
    return d.dense_forward(h, p[prefix + ".q2.W"], p[prefix + ".q2.b"])


def select_action(q: LocalQValues, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over available actions; argmax ties go to lowest index."""
    avail_idx = np.flatnonzero(q.avail > 0)
    if avail_idx.size == 0:
        raise ContractViolation("no available actions")
    if epsilon > 0 and rng.random() < epsilon:
        return int(avail_idx[rng.integers(avail_idx.size)])
    return int(np.argmax(q.masked()))


class Policy:
    """Decentralized executor for one agent.

    Holds only this agent's network parameters (trunk, utility head, and
    awareness encoder).  There is deliberately no slot for the global state,
    other agents' trajectories, the mixer, or the posterior estimator.
    """

    _PREFIX_PARTS = (".in.", ".gru.", ".q1.", ".q2.", ".aware.")

    def __init__(self, params: d.ParameterSet, spec: AgentSpec, agent_id: int,
                 noise_rng: np.random.Generator):
        self.spec = spec
        self.agent_id = agent_id
        pre = spec.prefix(agent_id)
        self._p = {name: arr for name, arr in params.subset((pre,)).items()
                   if any(part in name for part in self._PREFIX_PARTS)}
        self._prefix = pre
        self._noise_rng = noise_rng
        self._onehot = np.zeros(spec.n_agents)
        self._onehot[agent_id] = 1.0
        self.traj = TrajectoryState(np.zeros(spec.hidden_dim), agent_id)
        self.last_action = -1
        self.last_awareness: awareness.AwarenessSet | None = None

    def reset(self) -> None:
        self.traj = TrajectoryState(np.zeros(self.spec.hidden_dim), self.agent_id)
        self.last_action = -1
        self.last_awareness = None

    def _features(self, obs: np.ndarray) -> np.ndarray:
        last = np.zeros(self.spec.n_actions)
        if self.last_action >= 0:
            last[self.last_action] = 1.0
        parts = [obs, last]
        if self.spec.share_params:
            parts.append(self._onehot)
        return np.concatenate(parts)

    def step_q(self, obs: np.ndarray) -> np.ndarray:
        """Advance the trajectory on `obs` and return raw utilities."""
        feats = self._features(obs)[None, :]
        h = trajectory_update(feats, self.traj.hidden[None, :], self._p, self._prefix)
        self.traj = TrajectoryState(h[0], self.agent_id, self.traj.t + 1)
        samples = None
        if self.spec.use_awareness:
            onehot = self._onehot[None, :] if self.spec.share_params else None
            mean, std = awareness.encode_awareness(
                h, self._p, self._prefix + ".aware", self.spec.n_agents,
                self.spec.aware_dim, agent_onehot=onehot)
            noise = self._noise_rng.standard_normal(mean.shape)
            c = awareness.sample_awareness(mean, std, noise)
            self.last_awareness = awareness.AwarenessSet(mean[0], std[0], c[0], noise[0])
            samples = c.reshape(1, -1)
        q = local_q(h, samples, self._p, self._prefix)
        return q[0]

    def act(self, obs: np.ndarray, avail: np.ndarray, epsilon: float,
            action_rng: np.random.Generator) -> int:
        with awareness.execution_mode():
            q = LocalQValues(self.step_q(obs), np.asarray(avail))
        action = select_action(q, epsilon, action_rng)
        self.last_action = action
        return action
