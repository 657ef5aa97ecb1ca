"""
Shared domain types and the replay buffers.

- Transition / TransitionBatch: single samples and column-stacked batches
- ReturnDistribution: exact atom distributions over returns
- DropoutConfig: alpha, beta, gamma and the reward supremum R_m
- ReplayBuffer: fixed-capacity FIFO ring buffer used for D_env and D_model
- Seed plumbing: one root seed derives every per-subsystem random stream
"""

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from src.errors import ConfigError, MBDPError, NumericError

# Slack for ceil((1 - fraction) * n) so 0.8 * 10 does not round up to 9
_CEIL_SLACK = 1e-9


def retained_count(drop_fraction, n):
    """Number of items kept when the top `drop_fraction` of n is dropped: ceil((1-f)n), at least 1."""
    if n <= 0:
        return 0
    keep = math.ceil((1.0 - drop_fraction) * n - _CEIL_SLACK)
    return int(min(max(keep, 1), n))


def derive_seed(root_seed, *names):
    """Deterministic integer seed for the stream identified by `names` under `root_seed`."""
    words = [int(root_seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, (int, np.integer)):
            words.append(int(name) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(name).encode("utf-8")))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def make_rng(root_seed, *names):
    return np.random.default_rng(derive_seed(root_seed, *names))


def as_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool = False

    def __post_init__(self):
        state = np.atleast_1d(np.asarray(self.state, dtype=np.float64))
        action = np.atleast_1d(np.asarray(self.action, dtype=np.float64))
        next_state = np.atleast_1d(np.asarray(self.next_state, dtype=np.float64))
        if state.ndim != 1 or next_state.ndim != 1 or action.ndim != 1:
            raise ValueError("transition vectors must be one-dimensional")
        if state.shape != next_state.shape:
            raise ValueError(f"state dim {state.shape[0]} != next_state dim {next_state.shape[0]}")
        object.__setattr__(self, "state", state)
        object.__setattr__(self, "action", action)
        object.__setattr__(self, "next_state", next_state)
        object.__setattr__(self, "reward", float(self.reward))
        object.__setattr__(self, "terminal", bool(self.terminal))
        if not math.isfinite(self.reward):
            raise NumericError(f"reward is {self.reward}", where="transition")

    @property
    def is_finite(self):
        return bool(
            np.all(np.isfinite(self.state))
            and np.all(np.isfinite(self.action))
            and np.all(np.isfinite(self.next_state))
            and math.isfinite(self.reward)
        )


@dataclass
class TransitionBatch:
    """Column-stacked transitions; rows line up across the five arrays."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self):
        return int(self.rewards.shape[0])

    @classmethod
    def from_transitions(cls, transitions):
        transitions = list(transitions)
        if not transitions:
            raise MBDPError("cannot build a batch from zero transitions")
        return cls(
            states=np.stack([t.state for t in transitions]),
            actions=np.stack([t.action for t in transitions]),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=np.stack([t.next_state for t in transitions]),
            terminals=np.array([t.terminal for t in transitions], dtype=bool),
        )

    def take(self, idx):
        return TransitionBatch(
            self.states[idx], self.actions[idx], self.rewards[idx],
            self.next_states[idx], self.terminals[idx],
        )

    def to_transitions(self):
        return [
            Transition(self.states[i], self.actions[i], self.rewards[i], self.next_states[i], self.terminals[i])
            for i in range(len(self))
        ]


def coerce_batch(data):
    """Accept a TransitionBatch or any sequence of Transition."""
    if isinstance(data, TransitionBatch):
        return data
    return TransitionBatch.from_transitions(data)


@dataclass(frozen=True)
class ReturnDistribution:
    """Discrete return distribution: atom values sorted ascending with positive probabilities."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        probs = np.asarray(self.probs, dtype=np.float64).ravel()
        if values.shape != probs.shape or values.size == 0:
            raise ValueError("distribution needs matching, nonempty values and probs")
        if np.any(probs <= 0.0):
            raise ValueError("atom probabilities must be positive")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {probs.sum():.12f}, not 1")
        order = np.argsort(values, kind="stable")
        object.__setattr__(self, "values", values[order])
        object.__setattr__(self, "probs", probs[order])

    @classmethod
    def from_samples(cls, values, probs=None, merge=True):
        values = np.asarray(values, dtype=np.float64).ravel()
        if probs is None:
            probs = np.full(values.size, 1.0 / values.size)
        probs = np.asarray(probs, dtype=np.float64).ravel()
        keep = probs > 0.0
        values, probs = values[keep], probs[keep]
        if merge:
            uniq, inverse = np.unique(values, return_inverse=True)
            merged = np.zeros(uniq.size)
            np.add.at(merged, inverse, probs)
            values, probs = uniq, merged
        return cls(values, probs)

    @property
    def atoms(self):
        return list(zip(self.values.tolist(), self.probs.tolist()))

    def mean(self):
        return float(np.dot(self.values, self.probs))

    def negate(self):
        return ReturnDistribution(-self.values, self.probs)

    def shift(self, c):
        return ReturnDistribution(self.values + c, self.probs)

    def scale(self, lam):
        if lam <= 0:
            raise ValueError("scale factor must be positive")
        return ReturnDistribution(self.values * lam, self.probs)


@dataclass(frozen=True)
class DropoutConfig:
    alpha: float = 0.2
    beta: float = 0.2
    gamma: float = 0.99
    reward_sup: float = 1.0

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.alpha < 1.0:
            problems.append(f"dropout.alpha={self.alpha}: must satisfy 0 <= alpha < 1")
        if not 0.0 <= self.beta < 1.0:
            problems.append(f"dropout.beta={self.beta}: must satisfy 0 <= beta < 1")
        if not 0.0 < self.gamma < 1.0:
            problems.append(f"dropout.gamma={self.gamma}: must satisfy 0 < gamma < 1")
        if not self.reward_sup > 0.0:
            problems.append(f"reward_sup={self.reward_sup}: must be positive")
        if problems:
            raise ConfigError(problems)


@dataclass
class ReplayBuffer:
    """
    Fixed-capacity FIFO ring buffer.

    Storage is allocated on the first push from that transition's dimensions.
    Logical index 0 is always the oldest entry.
    """

    capacity: int
    write_cursor: int = 0
    _size: int = 0
    _arrays: dict = field(default=None, repr=False)

    def __post_init__(self):
        if int(self.capacity) <= 0:
            raise ConfigError(f"buffer capacity={self.capacity}: must be a positive integer")
        self.capacity = int(self.capacity)

    def __len__(self):
        return self._size

    @property
    def size(self):
        return self._size

    @property
    def state_dim(self):
        return None if self._arrays is None else self._arrays["states"].shape[1]

    def _allocate(self, t):
        cap = self.capacity
        self._arrays = {
            "states": np.zeros((cap, t.state.size)),
            "actions": np.zeros((cap, t.action.size)),
            "rewards": np.zeros(cap),
            "next_states": np.zeros((cap, t.next_state.size)),
            "terminals": np.zeros(cap, dtype=bool),
        }

    def push(self, t):
        """Append one transition, evicting the oldest entry when full."""
        if not t.is_finite:
            raise NumericError("refusing to store a non-finite transition", where="replay buffer")
        if self._arrays is None:
            self._allocate(t)
        arr = self._arrays
        if t.state.size != arr["states"].shape[1] or t.action.size != arr["actions"].shape[1]:
            raise ValueError(
                f"transition dims ({t.state.size}, {t.action.size}) do not match buffer "
                f"({arr['states'].shape[1]}, {arr['actions'].shape[1]})"
            )
        i = self.write_cursor
        arr["states"][i] = t.state
        arr["actions"][i] = t.action
        arr["rewards"][i] = t.reward
        arr["next_states"][i] = t.next_state
        arr["terminals"][i] = t.terminal
        self.write_cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        return self

    def push_batch(self, batch):
        for t in batch.to_transitions():
            self.push(t)
        return self

    def _physical(self, logical_idx):
        start = (self.write_cursor - self._size) % self.capacity
        return (start + np.asarray(logical_idx)) % self.capacity

    def as_batch(self, logical_idx=None):
        if self._size == 0:
            raise MBDPError("replay buffer is empty")
        if logical_idx is None:
            logical_idx = np.arange(self._size)
        phys = self._physical(logical_idx)
        arr = self._arrays
        return TransitionBatch(
            arr["states"][phys].copy(), arr["actions"][phys].copy(), arr["rewards"][phys].copy(),
            arr["next_states"][phys].copy(), arr["terminals"][phys].copy(),
        )

    def entries(self):
        return [] if self._size == 0 else self.as_batch().to_transitions()

    def sample_indices(self, k, seed):
        if k > self._size:
            raise MBDPError(f"cannot sample {k} entries from a buffer holding {self._size}")
        if k <= 0:
            raise ValueError("sample size must be positive")
        return as_rng(seed).choice(self._size, size=k, replace=False)

    def sample(self, k, seed):
        """k distinct entries, uniformly without replacement; same seed -> same sample."""
        return self.as_batch(self.sample_indices(k, seed)).to_transitions()

    def sample_batch(self, k, seed):
        return self.as_batch(self.sample_indices(k, seed))

    def to_frame(self):
        """One transition per row: s_*, a_*, r, s2_*, terminal."""
        if self._size == 0:
            return pd.DataFrame()
        b = self.as_batch()
        cols = {}
        for j in range(b.states.shape[1]):
            cols[f"s_{j}"] = b.states[:, j]
        for j in range(b.actions.shape[1]):
            cols[f"a_{j}"] = b.actions[:, j]
        cols["r"] = b.rewards
        for j in range(b.next_states.shape[1]):
            cols[f"s2_{j}"] = b.next_states[:, j]
        cols["terminal"] = b.terminals
        return pd.DataFrame(cols)

    def dump_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path, capacity=None):
        df = pd.read_csv(path)
        s_cols = [c for c in df.columns if c.startswith("s_")]
        a_cols = [c for c in df.columns if c.startswith("a_")]
        s2_cols = [c for c in df.columns if c.startswith("s2_")]
        buf = cls(capacity or max(len(df), 1))
        for row in df.itertuples(index=False):
            rec = row._asdict()
            buf.push(Transition(
                [rec[c] for c in s_cols], [rec[c] for c in a_cols], rec["r"],
                [rec[c] for c in s2_cols], bool(rec["terminal"]),
            ))
        return buf


def buffer_push(buffer, t):
    return buffer.push(t)


def buffer_sample(buffer, k, seed):
    return buffer.sample(k, seed)
