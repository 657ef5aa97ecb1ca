import copy

import numpy as np
import pytest

from src.agent import RandomPolicy
from src.config import config_from_dict
from src.core import ReplayBuffer, ReturnDistribution, make_rng
from src.envs import make_env

# Small enough that a full run takes a few seconds
TINY_RUN = {
    "seed": 3,
    "env": {"name": "pendulum", "horizon": 40},
    "schedule": {
        "epochs": 2,
        "env_steps_per_epoch": 60,
        "n_train": 1,
        "policy_updates_per_env_step": 1,
        "model_updates_per_env_step": 1,
        "init_random_steps": 60,
        "eval_episodes": 2,
        "checkpoint_every": 1,
    },
    "dropout": {"alpha": 0.2, "beta": 0.2, "gamma": 0.9},
    "ensemble": {"size": 3, "hidden": [16], "batch_size": 32, "min_transitions": 40},
    "rollout": {"n_starts": 10, "k_per_start": 5, "horizon": 2},
    "agent": {"hidden": [16], "batch_size": 32},
    "bounds": {"lipschitz_pairs": 50, "lipschitz_states": 20},
}


@pytest.fixture
def tiny_config():
    return config_from_dict(copy.deepcopy(TINY_RUN))


@pytest.fixture
def pendulum():
    return make_env("pendulum", seed=0)


def collect(env, n, seed=0):
    """n random-action transitions from `env`, resetting on episode end."""
    buf = ReplayBuffer(max(n, 1))
    policy = RandomPolicy(env.action_high)
    rng = make_rng(seed, "collect")
    obs = env.reset(seed=seed)
    episode = 0
    while len(buf) < n:
        tr = env.step(policy.act(obs, rng))
        buf.push(tr)
        if env.done:
            episode += 1
            obs = env.reset(seed=seed + episode)
        else:
            obs = tr.next_state
    return buf


@pytest.fixture
def pendulum_buffer(pendulum):
    return collect(pendulum, 300)


@pytest.fixture
def uniform_ten():
    return ReturnDistribution.from_samples(np.arange(1.0, 11.0))
