import numpy as np
import pytest

from dmsrd import envsim


@pytest.fixture
def pend():
    return envsim.make_env("pendulum-lite")


@pytest.fixture
def lander():
    return envsim.make_env("lander-lite")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class ConstantPolicy:
    """Deterministic-mean policy emitting a fixed action."""

    def __init__(self, env, value, std=1e-12):
        self.env = env
        self.action_dim = env.action_dim
        self.value = np.broadcast_to(np.asarray(value, dtype=float), (env.action_dim,))
        self.std = np.full(env.action_dim, std)

    def mean(self, states):
        return np.tile(self.value, (len(np.atleast_2d(states)), 1))


@pytest.fixture
def constant_policy():
    return ConstantPolicy
