"""Episode replay buffer: FIFO semantics and sampling statistics."""

import numpy as np
import pytest

from teamaware.env import EnvConfig
from teamaware.errors import ContractViolation
from teamaware.replay import EpisodeRecord, ReplayBuffer, stack_batch


def make_record(length=3, limit=5, n=2, obs_dim=4, state_dim=6, n_act=3,
                tag=0.0):
    obs = np.full((limit + 1, n, obs_dim), tag)
    state = np.full((limit + 1, state_dim), tag)
    avail = np.ones((limit + 1, n, n_act))
    actions = np.zeros((limit, n), dtype=np.int64)
    reward = np.zeros(limit)
    reward[length - 1] = tag
    terminated = np.zeros(limit)
    terminated[length - 1] = 1.0
    mask = np.zeros(limit)
    mask[:length] = 1.0
    return EpisodeRecord(obs, state, avail, actions, reward, terminated,
                         mask, length)


def test_fifo_eviction():
    buf = ReplayBuffer(capacity=3)
    for tag in range(4):
        buf.add(make_record(tag=float(tag)))
    assert len(buf) == 3
    tags = {rec.reward[2] for rec in buf._episodes}
    assert tags == {1.0, 2.0, 3.0}  # first inserted evicted


def test_size_never_exceeds_capacity():
    buf = ReplayBuffer(capacity=5)
    for tag in range(20):
        buf.add(make_record(tag=float(tag)))
        assert len(buf) <= 5


def test_round_trip_bit_exact(rng):
    rec = make_record()
    rec.obs[:] = rng.normal(size=rec.obs.shape)
    buf = ReplayBuffer(capacity=2)
    buf.add(rec)
    out = buf.sample(1, np.random.default_rng(0))[0]
    assert out is rec
    assert np.array_equal(out.obs, rec.obs)


def test_sample_full_buffer_is_permutation():
    buf = ReplayBuffer(capacity=4)
    for tag in range(4):
        buf.add(make_record(tag=float(tag)))
    out = buf.sample(4, np.random.default_rng(1))
    assert {rec.reward[2] for rec in out} == {0.0, 1.0, 2.0, 3.0}


def test_sample_fixed_rng_reproducible():
    buf = ReplayBuffer(capacity=10)
    for tag in range(10):
        buf.add(make_record(tag=float(tag)))
    a = buf.sample(3, np.random.default_rng(7))
    b = buf.sample(3, np.random.default_rng(7))
    assert [r.reward[2] for r in a] == [r.reward[2] for r in b]


def test_sample_uniformity(rng):
    buf = ReplayBuffer(capacity=10)
    for tag in range(10):
        buf.add(make_record(tag=float(tag)))
    n = 100_000
    counts = np.zeros(10)
    for _ in range(n):
        rec = buf.sample(1, rng)[0]
        counts[int(rec.reward[2])] += 1
    p = 0.1
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(counts / n - p) < 4 * se)


def test_insufficient_episodes_signalled():
    buf = ReplayBuffer(capacity=4)
    buf.add(make_record())
    assert not buf.can_sample(2)
    with pytest.raises(ContractViolation):
        buf.sample(2, np.random.default_rng(0))


def test_malformed_record_rejected():
    rec = make_record()
    rec.mask[4] = 1.0  # padding gap
    buf = ReplayBuffer(capacity=2)
    with pytest.raises(ContractViolation):
        buf.add(rec)


def test_stack_batch_truncates_to_longest():
    batch = stack_batch([make_record(length=2), make_record(length=4)])
    assert batch["obs"].shape[1] == 5      # T_max + 1
    assert batch["mask"].shape[1] == 4
    assert batch["mask"].sum() == 6.0
