import numpy as np
import pytest

from src.agent import (
    PolicyParams, RandomPolicy, actor_loss, critic_loss, critic_targets, evaluate_policy, load_policy,
    policy_update, random_policy_baseline, save_policy,
)
from src.core import ReplayBuffer, Transition
from src.envs import make_env
from src.errors import InsufficientDataError
from src.tinynn import Mlp, numerical_grad


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)


def random_buffer(n, obs_dim=3, action_dim=1, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(n)
    for _ in range(n):
        buf.push(Transition(rng.normal(size=obs_dim), rng.uniform(-1, 1, size=action_dim), rng.random(),
                            rng.normal(size=obs_dim), bool(rng.random() < 0.1)))
    return buf


@pytest.fixture
def policy():
    return PolicyParams.create(3, 1, np.array([2.0]), [8, 8], seed=0)


class TestGradients:
    def test_critic_regression(self, policy):
        batch = random_buffer(24).as_batch()
        y = critic_targets(policy, batch, np.random.default_rng(1).standard_normal((24, 1)))
        _, grads = critic_loss(policy, 0, batch, y)
        analytic = Mlp.flatten(grads)
        net = policy.critics[0]

        def loss_at(theta):
            trial = policy.copy()
            trial.critics[0].set_flat(theta)
            return critic_loss(trial, 0, batch, y)[0]

        idx = np.random.default_rng(2).choice(net.n_params, size=20, replace=False)
        numeric = numerical_grad(loss_at, net.get_flat(), idx)
        assert np.max(relative_error(analytic[idx], numeric)) < 1e-4

    def test_actor_objective(self, policy):
        states = np.random.default_rng(3).normal(size=(16, 3))
        noise = np.random.default_rng(4).standard_normal((16, 1))
        _, grads = actor_loss(policy, states, noise)
        analytic = Mlp.flatten(grads)

        def loss_at(theta):
            trial = policy.copy()
            trial.actor.set_flat(theta)
            return actor_loss(trial, states, noise)[0]

        idx = np.random.default_rng(5).choice(policy.actor.n_params, size=20, replace=False)
        numeric = numerical_grad(loss_at, policy.actor.get_flat(), idx)
        assert np.max(relative_error(analytic[idx], numeric)) < 1e-4


class TestPolicyUpdate:
    def test_zero_updates_leave_params(self, policy):
        before = policy.actor.get_flat().copy()
        policy_update(policy, random_buffer(64), 0, 32, seed=0)
        assert np.array_equal(policy.actor.get_flat(), before)

    def test_too_little_data(self, policy):
        with pytest.raises(InsufficientDataError):
            policy_update(policy, random_buffer(10), 1, 32, seed=0)

    def test_targets_track_critics(self, policy):
        policy_update(policy, random_buffer(64), 3, 32, seed=0)
        assert policy.updates == 3
        assert not np.array_equal(policy.targets[0].get_flat(), policy.critics[0].get_flat())
        assert not np.array_equal(policy.critics[0].get_flat(), policy.critics[1].get_flat())

    def test_target_is_polyak_average_of_critic(self, policy):
        before = [t.get_flat().copy() for t in policy.targets]
        policy_update(policy, random_buffer(64), 1, 32, seed=0)
        tau = policy.tau
        for j, old in enumerate(before):
            expected = old * (1.0 - tau) + tau * policy.critics[j].get_flat()
            assert np.array_equal(policy.targets[j].get_flat(), expected)

    @pytest.mark.slow
    def test_one_step_bandit_finds_best_action(self):
        # single state, terminal after one step, reward peaks at a = 0.5
        rng = np.random.default_rng(0)
        buf = ReplayBuffer(2000)
        for a in rng.uniform(-1, 1, size=2000):
            buf.push(Transition([1.0], [a], 1.0 - (a - 0.5) ** 2, [1.0], True))
        p = PolicyParams.create(1, 1, np.array([1.0]), [32], seed=1, entropy_weight=1e-3, tau=0.05,
                                actor_lr=3e-3, critic_lr=3e-3)
        policy_update(p, buf, 2000, 64, seed=2)
        best = p.act(np.array([1.0]), None, deterministic=True)[0]
        assert abs(best - 0.5) < 0.1


class TestEvaluation:
    def test_same_seed_same_mean(self, policy):
        env = make_env("pendulum", horizon=30)
        assert evaluate_policy(policy, env, 3, seed=5) == evaluate_policy(policy, env, 3, seed=5)

    def test_one_episode_has_zero_std(self, policy):
        _, std = evaluate_policy(policy, make_env("pendulum", horizon=30), 1, seed=0)
        assert std == 0.0

    def test_workers_do_not_change_results(self, policy):
        env = make_env("pendulum", horizon=30)
        assert evaluate_policy(policy, env, 4, seed=1) == evaluate_policy(policy, env, 4, seed=1, workers=2)

    def test_random_baseline_is_seeded_and_bounded(self):
        env = make_env("pendulum", horizon=50)
        mean, std = random_policy_baseline(env, 5, seed=3)
        assert (mean, std) == random_policy_baseline(env, 5, seed=3)
        assert 0.0 <= mean <= 50.0

    def test_random_policy_falls_inside_the_baseline_band(self):
        env = make_env("pendulum", horizon=50)
        mean, std = random_policy_baseline(env, 10, seed=3)
        other, _ = evaluate_policy(RandomPolicy(env.action_high), env, 10, seed=11, deterministic=False)
        assert mean - 3.0 * std <= other <= mean + 3.0 * std

    def test_random_policy_respects_bounds(self):
        actions = RandomPolicy(np.array([2.0, 0.5])).act(np.zeros((100, 3)), np.random.default_rng(0))
        assert actions.shape == (100, 2)
        assert np.all(np.abs(actions) <= [2.0, 0.5])

    def test_actions_stay_in_box(self, policy):
        a = policy.act(np.random.default_rng(0).normal(size=(50, 3)) * 10, np.random.default_rng(1))
        assert np.all(np.abs(a) <= 2.0)


def test_checkpoint_reload(policy, tmp_path):
    policy_update(policy, random_buffer(64), 2, 32, seed=0)
    save_policy(policy, tmp_path / "policy")
    again = load_policy(tmp_path / "policy")
    obs = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(again.act(obs, None, deterministic=True), policy.act(obs, None, deterministic=True))
    assert again.updates == 2
    assert np.array_equal(again.targets[1].get_flat(), policy.targets[1].get_flat())
