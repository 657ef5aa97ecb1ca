import itertools

import numpy as np
import pytest

from src.agent import RandomPolicy
from src.core import retained_count
from src.ensemble import EnsembleState, model_dropout
from src.envs import DiscreteMDP
from src.errors import MBDPError
from src.risk import exact_v_alpha
from src.rollout import (
    RolloutBatch, batch_stats, dropout_return_estimate, generate_rollouts, percentile_threshold, rollout_dropout,
    rollout_returns,
)


def make_batch(group_rewards, horizon=1):
    """One sample per rollout (t=0) unless horizon > 1, in which case rewards are laid out per rollout."""
    rewards, keys, rids, steps = [], [], [], []
    rid = 0
    for g, rs in enumerate(group_rewards):
        for i, r in enumerate(rs):
            rewards.append(float(r))
            keys.append(g)
            rids.append(rid + i // horizon)
            steps.append(i % horizon)
        rid += (len(rs) + horizon - 1) // horizon
    n = len(rewards)
    return RolloutBatch(
        states=np.zeros((n, 2)), actions=np.zeros((n, 1)), rewards=np.array(rewards),
        next_states=np.zeros((n, 2)), terminals=np.zeros(n, dtype=bool),
        group_keys=np.array(keys), rollout_ids=np.array(rids), timesteps=np.array(steps), horizon=horizon,
    )


class TestPercentile:
    def test_nearest_rank(self):
        assert percentile_threshold(np.arange(1, 11), 0.2) == 8

    def test_alpha_zero_is_max(self):
        assert percentile_threshold([3.0, -1.0, 7.5, 2.0], 0.0) == 7.5

    def test_constant_sequence(self):
        for alpha in (0.0, 0.3, 0.9):
            assert percentile_threshold([2.5] * 7, alpha) == 2.5

    def test_empty(self):
        with pytest.raises(MBDPError):
            percentile_threshold([], 0.2)


class TestRolloutDropout:
    def test_single_group(self):
        out = rollout_dropout(make_batch([range(1, 11)]), 0.2)
        assert sorted(out.rewards.tolist()) == [1, 2, 3, 4, 5, 6, 7, 8]
        assert out.thresholds == {0: 8.0}

    def test_alpha_zero_keeps_everything(self):
        batch = make_batch([range(1, 11), range(5, 12)])
        out = rollout_dropout(batch, 0.0)
        assert np.array_equal(out.rewards, batch.rewards)

    def test_thresholds_are_per_group(self):
        out = rollout_dropout(make_batch([range(1, 11), range(11, 21)]), 0.5)
        assert out.rewards.tolist() == [1, 2, 3, 4, 5, 11, 12, 13, 14, 15]
        assert out.thresholds == {0: 5.0, 1: 15.0}

    def test_small_groups_are_kept_whole(self):
        out = rollout_dropout(make_batch([[9, 1, 5], range(10)]), 0.5, min_group_size=5)
        assert sorted(out.rewards[out.group_keys == 0].tolist()) == [1, 5, 9]
        assert (out.group_keys == 1).sum() == 5

    def test_ties_keep_the_exact_count(self):
        out = rollout_dropout(make_batch([[1.0] * 10]), 0.2)
        assert len(out) == 8

    def test_invariants_over_random_batches(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            sizes = rng.integers(1, 30, size=int(rng.integers(1, 6)))
            groups = [np.round(rng.normal(size=n), 1) for n in sizes]
            batch = make_batch(groups)
            alpha = float(rng.uniform(0, 0.95))
            out = rollout_dropout(batch, alpha, min_group_size=1)
            for g, rs in enumerate(groups):
                kept = out.rewards[out.group_keys == g]
                assert kept.size == retained_count(alpha, rs.size)
                dropped = np.sort(rs)[kept.size:]
                assert dropped.size == 0 or kept.max() <= dropped.min()

    @pytest.mark.parametrize("mode, horizon", [("sample", 1), ("trajectory", 2)])
    def test_larger_alpha_keeps_a_subset(self, mode, horizon):
        rng = np.random.default_rng(7)
        for _ in range(300):
            sizes = rng.integers(1, 12, size=int(rng.integers(1, 5))) * horizon
            batch = make_batch([np.round(rng.normal(size=n), 1) for n in sizes], horizon=horizon)
            a1, a2 = np.sort(rng.uniform(0, 0.95, size=2))
            small = rollout_dropout(batch, a1, min_group_size=1, mode=mode, gamma=0.9)
            large = rollout_dropout(batch, a2, min_group_size=1, mode=mode, gamma=0.9)
            assert set(large.rollout_ids.tolist()) <= set(small.rollout_ids.tolist())

    def test_trajectory_mode_drops_whole_rollouts(self):
        # four rollouts of two steps in one group; returns 1.5, 3, 4.5, 6 at gamma 0.5
        batch = make_batch([[1, 1, 2, 2, 3, 3, 4, 4]], horizon=2)
        out = rollout_dropout(batch, 0.25, min_group_size=1, mode="trajectory", gamma=0.5)
        assert sorted(set(out.rollout_ids.tolist())) == [0, 1, 2]
        assert len(out) == 6
        assert out.thresholds == {0: 4.5}

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            rollout_dropout(make_batch([[1, 2]]), 0.2, mode="episode")


class TestReturnEstimate:
    def test_single_sample(self):
        assert dropout_return_estimate(make_batch([[2.0]]), 0.99) == 2.0

    def test_geometric_sum(self):
        assert dropout_return_estimate(make_batch([[1, 1, 1]], horizon=3), 0.5) == pytest.approx(1.75)

    def test_matches_independent_recomputation(self):
        rng = np.random.default_rng(3)
        batch = make_batch([rng.normal(size=12), rng.normal(size=8)], horizon=4)
        totals = {}
        for r, rid, t in zip(batch.rewards, batch.rollout_ids, batch.timesteps):
            totals[rid] = totals.get(rid, 0.0) + 0.9 ** t * r
        expected = sum(totals.values()) / len(totals)
        assert dropout_return_estimate(batch, 0.9) == pytest.approx(expected, abs=1e-12)
        assert rollout_returns(batch, 0.9)[0].tolist() == sorted(totals)

    @pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 0.75])
    def test_exhaustive_rollouts_give_the_exact_tail_value(self, alpha):
        # two equally likely states each step: all 8 trajectories have probability 1/8
        mdp = DiscreteMDP(
            transitions=np.full((2, 1, 2), 0.5),
            rewards=np.array([[0.3], [1.0]]),
            initial=np.array([0.5, 0.5]),
            horizon=2,
            gamma=0.9,
        )
        flat = [mdp.rewards[s, 0] for path in itertools.product([0, 1], repeat=3) for s in path]
        batch = make_batch([flat], horizon=3)
        kept = rollout_dropout(batch, alpha, min_group_size=1, mode="trajectory", gamma=mdp.gamma)
        expected = exact_v_alpha(mdp, np.ones((2, 1)), alpha)
        assert dropout_return_estimate(kept, mdp.gamma) == pytest.approx(expected, abs=1e-9)

    def test_empty(self):
        with pytest.raises(MBDPError):
            dropout_return_estimate(make_batch([[]]), 0.9)


class TestGenerate:
    @pytest.fixture
    def ensemble(self):
        return EnsembleState.create(3, 1, 3, [8], seed=0)

    def test_minimal_rollout(self, ensemble, pendulum, pendulum_buffer):
        batch = generate_rollouts(ensemble, RandomPolicy(pendulum.action_high), pendulum_buffer, 1, 1, 1, 0, pendulum)
        assert len(batch) == 1
        assert batch.groups.tolist() == [0]

    def test_counts(self, ensemble, pendulum, pendulum_buffer):
        batch = generate_rollouts(ensemble, RandomPolicy(pendulum.action_high), pendulum_buffer, 4, 8, 3, 0, pendulum)
        assert len(batch) == 96
        assert batch.truncated == 0
        assert [int((batch.group_keys == g).sum()) for g in batch.groups] == [24, 24, 24, 24]
        assert sorted(set(batch.rollout_ids.tolist())) == list(range(32))

    def test_deterministic_single_model_collapses(self, pendulum, pendulum_buffer):
        ens = EnsembleState.create(3, 1, 3, [8], seed=0)
        ens.retained = [1]
        batch = generate_rollouts(ens, RandomPolicy(pendulum.action_high), pendulum_buffer, 2, 5, 3, 0, pendulum,
                                  deterministic=True)
        for g in batch.groups:
            rows = batch.group_keys == g
            for t in range(3):
                at_t = batch.next_states[rows & (batch.timesteps == t)]
                assert np.all(at_t == at_t[0])

    def test_uses_only_retained_members(self, pendulum, pendulum_buffer):
        ens = EnsembleState.create(3, 1, 4, [8], seed=0)
        for i, m in enumerate(ens.members):
            m.bias, m.stale = float(i), False
        model_dropout(ens, 0.5)
        assert ens.retained_ids == [0, 1]
        batch = generate_rollouts(ens, RandomPolicy(pendulum.action_high), pendulum_buffer, 3, 4, 2, 1, pendulum)
        assert len(batch) == 24
        assert batch.model_ids.shape == (24,)
        assert set(batch.model_ids.tolist()) <= {0, 1}
        kept = rollout_dropout(batch, 0.5, min_group_size=1)
        assert set(kept.model_ids.tolist()) <= {0, 1}

    def test_worker_count_does_not_change_results(self, ensemble, pendulum, pendulum_buffer):
        policy = RandomPolicy(pendulum.action_high)
        a = generate_rollouts(ensemble, policy, pendulum_buffer, 6, 4, 3, 9, pendulum, workers=1)
        b = generate_rollouts(ensemble, policy, pendulum_buffer, 6, 4, 3, 9, pendulum, workers=3)
        assert np.array_equal(a.next_states, b.next_states)
        assert np.array_equal(a.rewards, b.rewards)

    def test_batch_stats(self, ensemble, pendulum, pendulum_buffer):
        batch = generate_rollouts(ensemble, RandomPolicy(pendulum.action_high), pendulum_buffer, 4, 5, 2, 0, pendulum)
        kept = rollout_dropout(batch, 0.2)
        row = batch_stats(batch, kept, epoch=3)
        assert row["groups"] == 4 and row["pre_size"] == 40 and row["post_size"] == 32
        assert row["retained_fraction"] == pytest.approx(0.8)
