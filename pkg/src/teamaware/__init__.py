"""Cooperative multi-agent Q-learning with per-teammate stochastic awareness.

Agents decompose their local recurrent trajectory into one diagonal-Gaussian
awareness distribution per teammate, act on reparameterized samples, and are
trained under centralized value factorization (VDN / QMIX / QPLEX) with a
variational mutual-information regularizer.  Execution is fully
decentralized: each agent infers its awareness from local history alone.
"""

__version__ = "0.1.0"

from . import agent, awareness, config, diffcore, env, mixer, replay, trainer  # noqa: F401
