"""Per-teammate stochastic awareness: encoding, sampling, and the
information-theoretic regularizer.

Each agent decomposes its own recurrent trajectory embedding into one
diagonal-Gaussian "awareness" distribution per teammate (including itself)
and acts on a reparameterized sample.  During centralized training a
variational posterior conditioned on *both* agents' trajectories is fit, and
the forward KL from the locally-encoded distribution to that posterior is the
awareness learning loss; minimizing it tightens a variational lower bound on
the mutual information between the awareness and the target agent's actual
trajectory.  The posterior is a training-only component and must never run on
the decentralized execution path, which `execution_mode` enforces.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as d
from .errors import ConfigurationError, ContractViolation

SIGMA_FLOOR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)

_execution_depth = 0


@contextmanager
def execution_mode():
    """Marks decentralized execution; training-only ops raise inside it."""
    global _execution_depth
    _execution_depth += 1
    try:
        yield
    finally:
        _execution_depth -= 1


def in_execution_mode() -> bool:
    return _execution_depth > 0


@dataclass
class AwarenessSet:
    """One agent's n awareness distributions and their pinned-noise samples.

    Arrays are [..., n_agents, dim]; `samples = mean + std * noise` holds
    exactly for the stored noise.
    """

    mean: np.ndarray
    std: np.ndarray
    samples: np.ndarray | None = None
    noise: np.ndarray | None = None


@dataclass
class PosteriorOutput:
    """Variational posterior moments for one (i, j) pair batch: [..., dim]."""

    mean: np.ndarray
    std: np.ndarray


def init_encoder_params(ps: d.ParameterSet, rng: np.random.Generator, prefix: str,
                        traj_dim: int, n_agents: int, aware_dim: int,
                        hidden: int = 64, id_conditioned: bool = True) -> None:
    in_dim = traj_dim + (n_agents if id_conditioned else 0)
    d.init_dense(ps, rng, prefix + ".h", in_dim, hidden)
    d.init_dense(ps, rng, prefix + ".out", hidden, 2 * n_agents * aware_dim)


def init_posterior_params(ps: d.ParameterSet, rng: np.random.Generator, prefix: str,
                          traj_dim: int, n_agents: int, aware_dim: int,
                          hidden: int = 64) -> None:
    in_dim = 2 * traj_dim + 2 * n_agents
    d.init_dense(ps, rng, prefix + ".h", in_dim, hidden)
    d.init_dense(ps, rng, prefix + ".out", hidden, 2 * aware_dim)


def encode_awareness(traj, p: Mapping, prefix: str, n_agents: int, aware_dim: int,
                     agent_onehot=None):
    """Trajectory embedding -> (mean, std) of n diagonal Gaussians.

    One LeakyReLU hidden layer, then a linear head whose first half is the
    means and second half passes through softplus (+ floor) for the stds.
    Returns arrays shaped [rows, n_agents, aware_dim]; deterministic.
    """
    inp = traj if agent_onehot is None else d.concat([traj, agent_onehot])
    if d.val(inp).shape[-1] != d.val(p[prefix + ".h.W"]).shape[0]:
        raise ConfigurationError("awareness encoder input width mismatch")
    h = d.leaky_relu(d.dense_forward(inp, p[prefix + ".h.W"], p[prefix + ".h.b"]))
    out = d.dense_forward(h, p[prefix + ".out.W"], p[prefix + ".out.b"])
    half = n_agents * aware_dim
    rows = d.val(out).shape[0]
    mean = d.reshape(d.slice_last(out, 0, half), (rows, n_agents, aware_dim))
    std = d.add(d.softplus(d.slice_last(out, half, 2 * half)), SIGMA_FLOOR)
    std = d.reshape(std, (rows, n_agents, aware_dim))
    return mean, std


def sample_awareness(mean, std, noise: np.ndarray):
    """Reparameterized draw `mean + std * noise`.

    `noise` is a plain array (caller draws it, or pins it in tests), so no
    gradient can flow into it; gradients reach only mean and std.
    """
    if np.any(d.val(std) <= 0):
        raise ContractViolation("awareness std must be positive")
    return d.add(mean, d.mul(std, noise))


def posterior_estimate(traj_self, traj_other, p: Mapping, prefix: str,
                       pair_onehot, aware_dim: int):
    """Variational posterior q(c | tau_i, tau_j) as a diagonal Gaussian.

    Input rows are (tau_i, tau_j, one-hot i, one-hot j); same hidden/head
    shape discipline as the encoder.  Training-only: both trajectories are
    centralized information, so calling this during execution is an error.
    """
    if in_execution_mode():
        raise ContractViolation(
            "posterior estimator is centralized-training-only; "
            "it must not run on the execution path")
    inp = d.concat([traj_self, traj_other, pair_onehot])
    if d.val(inp).shape[-1] != d.val(p[prefix + ".h.W"]).shape[0]:
        raise ConfigurationError("posterior estimator input width mismatch")
    h = d.leaky_relu(d.dense_forward(inp, p[prefix + ".h.W"], p[prefix + ".h.b"]))
    out = d.dense_forward(h, p[prefix + ".out.W"], p[prefix + ".out.b"])
    mean = d.slice_last(out, 0, aware_dim)
    std = d.add(d.softplus(d.slice_last(out, aware_dim, 2 * aware_dim)), SIGMA_FLOOR)
    return mean, std


def kl_diag_gaussian(mean_p, std_p, mean_q, std_q):
    """Closed-form KL(p || q) for diagonal Gaussians, summed over the last axis.

    Per dimension: log(sq/sp) + (sp^2 + (mp - mq)^2) / (2 sq^2) - 1/2.
    """
    if np.any(d.val(std_p) <= 0) or np.any(d.val(std_q) <= 0):
        raise ContractViolation("KL needs strictly positive stds")
    log_ratio = d.sub(d.vlog(std_q), d.vlog(std_p))
    var_q2 = d.mul(2.0, d.square(std_q))
    quad = d.div(d.add(d.square(std_p), d.square(d.sub(mean_p, mean_q))), var_q2)
    return d.vsum(d.add(log_ratio, d.sub(quad, 0.5)), axis=-1)


def gaussian_log_pdf(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over the last axis (numpy only)."""
    z = (x - mean) / std
    return np.sum(-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI, axis=-1)


def awareness_entropy(std) -> np.ndarray:
    """Differential entropy 0.5 * sum log(2*pi*e*sigma^2) over the last axis.

    Diagnostics only; never part of the training gradient.
    """
    s = d.val(std)
    if np.any(s <= 0):
        raise ContractViolation("entropy needs positive stds")
    return np.sum(0.5 * (np.log(2.0 * math.pi * s * s) + 1.0), axis=-1)


def variance_summary(std, target_id: int) -> np.ndarray:
    """Mean std over dimensions for one target agent: [..., n, dim] -> [...]."""
    s = d.val(std)
    n = s.shape[-2]
    if not 0 <= target_id < n:
        raise ContractViolation(f"target_id {target_id} out of range")
    return np.mean(s[..., target_id, :], axis=-1)


def awareness_learning_loss(mean_p, std_p, mean_q, std_q, n_agents: int,
                            mask=None):
    """Masked mean KL per ordered (i, j) pair, plus the summed total.

    Inputs are pair-major rows ordered (batch, i, j): shape [R, dim] with
    R = B * n * n, or per-timestep lists thereof.  `mask` is [B] (or a list
    per timestep) marking valid rows; padded timesteps contribute nothing.
    Returns (total, kl_matrix) where kl_matrix is an [n, n] Var of per-pair
    means over batch, time, and valid steps, and total is its sum.
    """
    if not isinstance(mean_p, (list, tuple)):
        mean_p, std_p = [mean_p], [std_p]
        mean_q, std_q = [mean_q], [std_q]
        mask = [mask]
    if len(mean_p) == 0:
        raise ContractViolation("awareness loss needs a non-empty batch")
    matrix_acc = None
    weight = 0.0
    for t in range(len(mean_p)):
        kl = kl_diag_gaussian(mean_p[t], std_p[t], mean_q[t], std_q[t])  # [R]
        rows = d.val(kl).shape[0]
        b = rows // (n_agents * n_agents)
        kl = d.reshape(kl, (b, n_agents, n_agents))
        m = np.ones(b) if mask is None or mask[t] is None else np.asarray(mask[t], dtype=np.float64)
        kl = d.mul(kl, m[:, None, None])
        term = d.vsum(kl, axis=0)
        matrix_acc = term if matrix_acc is None else d.add(matrix_acc, term)
        weight += float(np.sum(m))
    if weight == 0.0:
        raise ContractViolation("awareness loss mask is empty")
    kl_matrix = d.mul(matrix_acc, 1.0 / weight)
    return d.vsum(kl_matrix), kl_matrix
