"""Centralized value factorization: additive, monotone-hypernetwork, and
duplex-dueling mixing of per-agent utilities into a joint value.

All three mixers keep the individual-global-max property: the joint greedy
action equals the tuple of per-agent greedy actions.  That is not assumed,
it is checked by `igm_check`, which enumerates every joint action at small
scale and compares argmaxes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as d
from .errors import ConfigurationError, ContractViolation

MIXER_KINDS = ("vdn", "qmix", "qplex")
MIX_HIDDEN = 32        # mixing-layer width
HYPER_HIDDEN = 32      # hypernetwork hidden width
LAMBDA_FLOOR = 1e-3    # keeps duplex-dueling weights away from zero


@dataclass
class MixerInput:
    """Per-agent chosen utilities, full utility rows, and the global state."""

    chosen_q: np.ndarray          # [N, n]
    q_rows: np.ndarray | None     # [N, n, A], needed by qplex
    state: np.ndarray | None      # [N, state_dim]
    actions_onehot: np.ndarray | None = None   # [N, n * A], needed by qplex


@dataclass
class MixerOutput:
    q_tot: np.ndarray             # [N]
    v_tot: np.ndarray | None = None
    a_tot: np.ndarray | None = None
    lambdas: np.ndarray | None = None   # [N, n]


def init_mixer_params(ps: d.ParameterSet, rng: np.random.Generator, kind: str,
                      n_agents: int, n_actions: int, state_dim: int,
                      mix_hidden: int = MIX_HIDDEN,
                      hyper_hidden: int = HYPER_HIDDEN) -> None:
    if kind not in MIXER_KINDS:
        raise ConfigurationError(f"unknown mixer kind: {kind!r}")
    if kind == "vdn":
        return
    if kind == "qmix":
        d.init_dense(ps, rng, "mix.w1.h", state_dim, hyper_hidden)
        d.init_dense(ps, rng, "mix.w1.out", hyper_hidden, n_agents * mix_hidden)
        d.init_dense(ps, rng, "mix.b1", state_dim, mix_hidden)
        d.init_dense(ps, rng, "mix.w2.h", state_dim, hyper_hidden)
        d.init_dense(ps, rng, "mix.w2.out", hyper_hidden, mix_hidden)
        d.init_dense(ps, rng, "mix.b2.h", state_dim, hyper_hidden)
        d.init_dense(ps, rng, "mix.b2.out", hyper_hidden, 1)
        return
    # qplex: one small head producing a positive weight per agent
    d.init_dense(ps, rng, "mix.lam.h", state_dim + n_agents * n_actions, hyper_hidden)
    d.init_dense(ps, rng, "mix.lam.out", hyper_hidden, n_agents)


def vdn_mix(chosen_q):
    """Additive factorization: the joint value is the sum of utilities."""
    return d.vsum(chosen_q, axis=-1)


def qmix_mix(chosen_q, state, p: Mapping):
    """Monotone mixing: layer weights come from state-conditioned
    hypernetworks with absolute value applied, so dQ_tot/dQ_i >= 0.

    Two mixing layers of width `MIX_HIDDEN` with an ELU between; biases are
    unconstrained (the second from a two-layer state head).
    """
    if state is None:
        raise ContractViolation("qmix needs the global state")
    rows = d.val(chosen_q).shape[0]
    n = d.val(chosen_q).shape[1]
    width = d.val(p["mix.b1.b"]).shape[0]
    w1 = d.vabs(d.dense_forward(
        d.relu(d.dense_forward(state, p["mix.w1.h.W"], p["mix.w1.h.b"])),
        p["mix.w1.out.W"], p["mix.w1.out.b"]))
    w1 = d.reshape(w1, (rows, n, width))
    b1 = d.dense_forward(state, p["mix.b1.W"], p["mix.b1.b"])
    hidden = d.elu(d.add(d.reshape(d.matmul(d.reshape(chosen_q, (rows, 1, n)), w1),
                                   (rows, width)), b1))
    w2 = d.vabs(d.dense_forward(
        d.relu(d.dense_forward(state, p["mix.w2.h.W"], p["mix.w2.h.b"])),
        p["mix.w2.out.W"], p["mix.w2.out.b"]))
    b2 = d.dense_forward(
        d.relu(d.dense_forward(state, p["mix.b2.h.W"], p["mix.b2.h.b"])),
        p["mix.b2.out.W"], p["mix.b2.out.b"])
    q_tot = d.add(d.vsum(d.mul(hidden, w2), axis=-1), d.reshape(b2, (rows,)))
    return q_tot


def qplex_mix(inp: MixerInput, p: Mapping) -> MixerOutput:
    """Duplex dueling: Q_tot = sum_i Q_i(a_i) + sum_i (lambda_i - 1) A_i(a_i)
    with per-agent advantages A_i = Q_i(a_i) - max_a Q_i(a) <= 0 and
    state/joint-action-conditioned weights lambda_i > 0.
    """
    if inp.q_rows is None:
        raise ContractViolation("qplex needs full per-agent utility rows")
    if inp.state is None or inp.actions_onehot is None:
        raise ContractViolation("qplex needs the global state and joint action")
    v_i = d.max_last(inp.q_rows)                       # [N, n]
    adv = d.sub(inp.chosen_q, v_i)                     # [N, n], <= 0
    head_in = d.concat([inp.state, inp.actions_onehot])
    lam = d.add(d.softplus(d.dense_forward(
        d.relu(d.dense_forward(head_in, p["mix.lam.h.W"], p["mix.lam.h.b"])),
        p["mix.lam.out.W"], p["mix.lam.out.b"])), LAMBDA_FLOOR)
    q_tot = d.add(d.vsum(inp.chosen_q, axis=-1),
                  d.vsum(d.mul(d.sub(lam, 1.0), adv), axis=-1))
    v_tot = d.vsum(v_i, axis=-1)
    a_tot = d.vsum(d.mul(lam, adv), axis=-1)
    return MixerOutput(q_tot, v_tot, a_tot, lam)


def mix(kind: str, inp: MixerInput, p: Mapping):
    """Joint value for any mixer kind; returns the Q_tot array/Var."""
    if kind == "vdn":
        return vdn_mix(inp.chosen_q)
    if kind == "qmix":
        return qmix_mix(inp.chosen_q, inp.state, p)
    if kind == "qplex":
        return qplex_mix(inp, p).q_tot
    raise ConfigurationError(f"unknown mixer kind: {kind!r}")


def greedy_joint_value(kind: str, q_rows: np.ndarray, state, p: Mapping):
    """max over joint actions of Q_tot, exact via the IGM structure:
    evaluate the mixer at the tuple of per-agent greedy actions."""
    greedy = np.argmax(q_rows, axis=-1)                        # [N, n]
    chosen = np.take_along_axis(q_rows, greedy[..., None], axis=-1)[..., 0]
    onehot = actions_onehot(greedy, q_rows.shape[-1])
    return mix(kind, MixerInput(chosen, q_rows, state, onehot), p)


def actions_onehot(actions: np.ndarray, n_actions: int) -> np.ndarray:
    """[N, n] int actions -> [N, n * n_actions] concatenated one-hots."""
    n_rows, n = actions.shape
    out = np.zeros((n_rows, n * n_actions))
    cols = actions + np.arange(n) * n_actions
    np.put_along_axis(out, cols, 1.0, axis=-1)
    return out


@dataclass
class IgmReport:
    kind: str
    trials: int
    violations: int
    examples: list

    @property
    def passed(self) -> bool:
        return self.violations == 0


def igm_check(kind: str, trials: int = 1000, n_agents_choices=(2, 3),
              n_actions_choices=(3, 4), state_dim: int = 6,
              rng: np.random.Generator | None = None) -> IgmReport:
    """Brute-force IGM audit on random instances.

    Each trial draws fresh mixer parameters, random per-agent utility rows,
    and a random state, then enumerates all |A|^n joint actions of Q_tot.
    The lexicographically-first joint argmax must equal the tuple of
    per-agent argmaxes (ties broken by lowest index).
    """
    rng = rng or np.random.default_rng(0)
    violations = 0
    examples = []
    for trial in range(trials):
        n = int(rng.choice(n_agents_choices))
        n_act = int(rng.choice(n_actions_choices))
        ps = d.ParameterSet()
        init_mixer_params(ps, rng, kind, n, n_act, state_dim)
        p = ps.raw()
        q_rows = rng.normal(size=(1, n, n_act))
        state = rng.normal(size=(1, state_dim))
        joint_actions = list(itertools.product(range(n_act), repeat=n))
        acts = np.array(joint_actions)                      # [K, n]
        rows = np.broadcast_to(q_rows, (len(acts), n, n_act))
        chosen = np.take_along_axis(rows, acts[..., None], axis=-1)[..., 0]
        states = np.broadcast_to(state, (len(acts), state_dim))
        onehot = actions_onehot(acts, n_act)
        q_tot = np.asarray(mix(kind, MixerInput(chosen, rows, states, onehot), p))
        brute = joint_actions[int(np.argmax(q_tot))]
        greedy = tuple(int(a) for a in np.argmax(q_rows[0], axis=-1))
        if brute != greedy:
            violations += 1
            if len(examples) < 3:
                examples.append({"trial": trial, "brute": brute, "greedy": greedy})
    return IgmReport(kind, trials, violations, examples)
