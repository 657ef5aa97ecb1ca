"""
Model rollouts and rollout-dropout.

Rollouts branch from start states sampled out of D_env; every rollout from
the same start shares a group. Rollout-dropout then keeps, per group, the
ceil((1 - alpha) n) lowest-reward samples (sample mode) or lowest-return
rollouts (trajectory mode). Ranking uses a stable sort, so the retained count
is exact even when rewards tie.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from src.core import TransitionBatch, as_rng, make_rng, retained_count
from src.ensemble import ensemble_predict
from src.errors import MBDPError

logger = logging.getLogger(__name__)

DEFAULT_MIN_GROUP_SIZE = 5


@dataclass
class RolloutBatch:
    """Column-stacked model samples; row i is tagged by group, rollout and timestep."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    group_keys: np.ndarray
    rollout_ids: np.ndarray
    timesteps: np.ndarray
    horizon: int
    start_indices: np.ndarray = None  # D_env logical index of each group's start state
    model_ids: np.ndarray = None  # ensemble member that predicted each sample
    thresholds: dict = field(default_factory=dict)
    truncated: int = 0
    generated: int = None

    def __post_init__(self):
        if self.generated is None:
            self.generated = len(self)

    def __len__(self):
        return int(self.rewards.shape[0])

    @property
    def groups(self):
        return np.unique(self.group_keys)

    def take(self, idx):
        return replace(
            self,
            states=self.states[idx], actions=self.actions[idx], rewards=self.rewards[idx],
            next_states=self.next_states[idx], terminals=self.terminals[idx],
            group_keys=self.group_keys[idx], rollout_ids=self.rollout_ids[idx],
            timesteps=self.timesteps[idx],
            model_ids=None if self.model_ids is None else self.model_ids[idx], thresholds=dict(self.thresholds),
        )

    def to_transitions(self):
        return TransitionBatch(self.states, self.actions, self.rewards, self.next_states, self.terminals)

    @classmethod
    def empty(cls, obs_dim, action_dim, horizon):
        z = np.zeros(0)
        return cls(np.zeros((0, obs_dim)), np.zeros((0, action_dim)), z, np.zeros((0, obs_dim)),
                   np.zeros(0, dtype=bool), z.astype(int), z.astype(int), z.astype(int), horizon)


def _roll_group(ens, policy, env, start, k, horizon, rng, deterministic, group):
    """k rollouts of length `horizon` from one start state, advanced in lockstep."""
    s = np.repeat(start[None, :], k, axis=0)
    alive = np.ones(k, dtype=bool)
    rows = []
    truncated = 0
    for t in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        a = policy.act(s[idx], rng, deterministic=deterministic)
        s_next, picks = ensemble_predict(ens, s[idx], a, rng, deterministic=deterministic, return_members=True)
        finite = np.all(np.isfinite(s_next), axis=1)
        if not finite.all():
            bad = idx[~finite]
            truncated += bad.size
            logger.warning(f"group {group}: truncated {bad.size} rollout(s) at t={t} on non-finite prediction")
            alive[bad] = False
            idx, a, s_next, picks = idx[finite], a[finite], s_next[finite], picks[finite]
        r = env.reward(s[idx], a)
        term = np.asarray(env.is_terminal(s_next), dtype=bool)
        rows.append((s[idx].copy(), a, r, s_next, term, idx, np.full(idx.size, t), picks))
        s[idx] = s_next
        alive[idx[term]] = False
    return rows, truncated


def generate_rollouts(ens, policy, d_env, n_starts, k_per_start, horizon, seed, env,
                      deterministic=False, workers=1):
    """
    Branched rollouts from n_starts D_env states, k_per_start each, using
    `env.reward` / `env.is_terminal` as the known reward and termination.
    Each group draws from its own derived stream, so `workers` does not change
    the output.
    """
    if not ens.retained_ids:
        raise MBDPError("model dropout subset is empty")
    if len(d_env) < n_starts:
        raise MBDPError(f"need {n_starts} start states, D_env holds {len(d_env)}")
    rng = as_rng(seed)
    start_idx = d_env.sample_indices(n_starts, rng)
    starts = d_env.as_batch(start_idx).states
    base = int(rng.integers(2 ** 31))

    def run(g):
        return _roll_group(ens, policy, env, starts[g], k_per_start, horizon,
                           make_rng(base, "rollout-group", g), deterministic, g)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(n_starts)))
    else:
        results = [run(g) for g in range(n_starts)]

    cols = [[] for _ in range(8)]
    keys = []
    truncated = 0
    for g, (rows, trunc) in enumerate(results):
        truncated += trunc
        for row in rows:
            for c, v in zip(cols, row):
                c.append(v)
            keys.append(np.full(row[2].shape[0], g))
    if not keys:
        batch = RolloutBatch.empty(starts.shape[1], env.action_dim, horizon)
        batch.start_indices, batch.truncated = start_idx, truncated
        return batch
    s, a, r, s2, term, rid, t, picks = (np.concatenate(c) for c in cols)
    group_keys = np.concatenate(keys)
    return RolloutBatch(
        s, a, r.astype(np.float64), s2, term, group_keys,
        group_keys * k_per_start + rid, t, horizon,
        start_indices=start_idx, model_ids=picks, truncated=truncated,
    )


def percentile_threshold(rewards, alpha):
    """Nearest-rank (1 - alpha) percentile: the ceil((1 - alpha) n)-th smallest value."""
    r = np.sort(np.asarray(rewards, dtype=np.float64).ravel())
    if r.size == 0:
        raise MBDPError("percentile of an empty sequence")
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha={alpha}: must satisfy 0 <= alpha < 1")
    return float(r[retained_count(alpha, r.size) - 1])


def rollout_returns(batch, gamma):
    """(rollout ids, discounted return sum_t gamma^t r of each rollout's samples)."""
    ids, inverse = np.unique(batch.rollout_ids, return_inverse=True)
    returns = np.bincount(inverse, weights=gamma ** batch.timesteps * batch.rewards, minlength=ids.size)
    return ids, returns


def _keep_lowest(scores, alpha, min_group_size):
    """Positions of the retained entries and the threshold for one group."""
    n = scores.size
    if n < min_group_size:
        return np.arange(n), float(scores.max())
    keep = retained_count(alpha, n)
    order = np.argsort(scores, kind="stable")[:keep]
    return order, float(scores[order[-1]])


def rollout_dropout(batch, alpha, min_group_size=DEFAULT_MIN_GROUP_SIZE, mode="sample", gamma=0.99):
    """
    Per-group pessimistic filter. In "sample" mode each sample is ranked by its
    reward; in "trajectory" mode whole rollouts are ranked by discounted return.
    Groups smaller than `min_group_size` (samples or rollouts) are kept whole.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha={alpha}: must satisfy 0 <= alpha < 1")
    if mode not in ("sample", "trajectory"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    keep_rows = []
    thresholds = {}
    if mode == "sample":
        for g in batch.groups:
            rows = np.flatnonzero(batch.group_keys == g)
            pos, thr = _keep_lowest(batch.rewards[rows], alpha, min_group_size)
            keep_rows.append(rows[pos])
            thresholds[int(g)] = thr
    else:
        ids, returns = rollout_returns(batch, gamma)
        group_of = {}
        for rid, g in zip(batch.rollout_ids, batch.group_keys):
            group_of[int(rid)] = int(g)
        id_groups = np.array([group_of[int(i)] for i in ids])
        kept_ids = []
        for g in np.unique(id_groups):
            members = np.flatnonzero(id_groups == g)
            pos, thr = _keep_lowest(returns[members], alpha, min_group_size)
            kept_ids.append(ids[members[pos]])
            thresholds[int(g)] = thr
        if kept_ids:
            keep_rows.append(np.flatnonzero(np.isin(batch.rollout_ids, np.concatenate(kept_ids))))
    rows = np.sort(np.concatenate(keep_rows)) if keep_rows else np.zeros(0, dtype=int)
    out = batch.take(rows)
    out.thresholds = thresholds
    return out


def dropout_return_estimate(batch, gamma):
    """Mean over retained rollout fragments of sum_t gamma^t r."""
    if len(batch) == 0:
        raise MBDPError("return estimate of an empty rollout batch")
    return float(np.mean(rollout_returns(batch, gamma)[1]))


def batch_stats(before, after, epoch):
    """Per-epoch rollout statistics row."""
    thr = list(after.thresholds.values())
    return {
        "epoch": epoch,
        "groups": int(before.groups.size),
        "pre_size": len(before),
        "post_size": len(after),
        "mean_threshold": float(np.mean(thr)) if thr else float("nan"),
        "retained_fraction": len(after) / len(before) if len(before) else float("nan"),
        "truncated": before.truncated,
    }
