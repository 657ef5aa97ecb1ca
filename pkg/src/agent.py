"""
SAC-style policy optimiser used on D_model.

Features:
- Squashed-Gaussian actor: a = high * tanh(mu + sigma * eps)
- Twin critics regressed to entropy-regularised one-step bootstrap targets
  from EMA target critics (target <- tau * critic + (1 - tau) * target)
- Fixed entropy weight
- Deterministic evaluation in the real environment, plus a seeded
  random-policy baseline
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from src.core import as_rng, derive_seed, make_rng
from src.errors import CheckpointError, InsufficientDataError, NumericError
from src.tinynn import (
    AdamState, GaussianHead, Mlp, gaussian_log_density, load_arrays, mse_loss, opt_step,
    save_arrays, softplus,
)

logger = logging.getLogger(__name__)

ACTOR_LOG_STD_MIN = -5.0
ACTOR_LOG_STD_MAX = 2.0
_LOG2 = math.log(2.0)


def _squash_correction(u):
    """-log(1 - tanh(u)^2), computed without cancellation; derivative is 2 tanh(u)."""
    return -2.0 * (_LOG2 - u - softplus(-2.0 * u))


class RandomPolicy:
    """Uniform actions over the box; zero action in deterministic mode."""

    def __init__(self, action_high):
        self.action_high = np.asarray(action_high, dtype=np.float64)

    def act(self, obs, rng, deterministic=False):
        obs = np.asarray(obs)
        shape = obs.shape[:-1] + self.action_high.shape
        if deterministic:
            return np.zeros(shape)
        return as_rng(rng).uniform(-1.0, 1.0, size=shape) * self.action_high


@dataclass
class PolicyParams:
    actor: Mlp
    critics: list
    targets: list
    action_high: np.ndarray
    gamma: float = 0.99
    entropy_weight: float = 0.05
    tau: float = 0.005
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    actor_opt: AdamState = None
    critic_opts: list = None
    updates: int = 0
    head: GaussianHead = field(init=False)

    def __post_init__(self):
        self.action_high = np.asarray(self.action_high, dtype=np.float64)
        self.head = GaussianHead(self.action_dim, ACTOR_LOG_STD_MIN, ACTOR_LOG_STD_MAX)
        if self.actor_opt is None:
            self.actor_opt = AdamState.for_params(self.actor.params)
        if self.critic_opts is None:
            self.critic_opts = [AdamState.for_params(c.params) for c in self.critics]

    @classmethod
    def create(cls, obs_dim, action_dim, action_high, hidden, seed, **kwargs):
        actor = Mlp([obs_dim, *hidden, 2 * action_dim], rng=make_rng(seed, "actor-init"))
        critics = [Mlp([obs_dim + action_dim, *hidden, 1], rng=make_rng(seed, "critic-init", j)) for j in range(2)]
        return cls(actor, critics, [c.copy() for c in critics], action_high, **kwargs)

    @property
    def obs_dim(self):
        return self.actor.widths[0]

    @property
    def action_dim(self):
        return self.action_high.size

    def distribution(self, obs):
        """Pre-squash mean and (clamped) log std."""
        mu, log_std, _ = self.head.split(self.actor.forward(np.atleast_2d(obs)))
        return mu, log_std

    def sample(self, obs, noise):
        """Reparameterised action and log-probability for fixed standard-normal noise."""
        mu, log_std = self.distribution(obs)
        u = mu + np.exp(log_std) * noise
        a = self.action_high * np.tanh(u)
        logp = (gaussian_log_density(u, mu, log_std)
                + np.sum(_squash_correction(u) - np.log(self.action_high), axis=-1))
        return a, logp

    def act(self, obs, rng, deterministic=False):
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 1
        mu, log_std = self.distribution(obs)
        if deterministic:
            a = self.action_high * np.tanh(mu)
        else:
            noise = as_rng(rng).standard_normal(mu.shape)
            a = self.action_high * np.tanh(mu + np.exp(log_std) * noise)
        return a[0] if single else a

    def q_values(self, nets, obs, actions):
        x = np.concatenate([obs, actions], axis=-1)
        return np.stack([n.forward(x)[:, 0] for n in nets], axis=0)

    def state_value(self, obs):
        """min_j Q_j(s, deterministic action); used for the Lipschitz estimate."""
        obs = np.atleast_2d(obs)
        a = self.act(obs, None, deterministic=True)
        return self.q_values(self.critics, obs, a).min(axis=0)

    def copy(self):
        return PolicyParams(
            self.actor.copy(), [c.copy() for c in self.critics], [t.copy() for t in self.targets],
            self.action_high.copy(), self.gamma, self.entropy_weight, self.tau, self.actor_lr,
            self.critic_lr, self.actor_opt.copy(), [o.copy() for o in self.critic_opts], self.updates,
        )


def critic_targets(p, batch, next_noise):
    """r + gamma (1 - done) (min_j Q_targ_j(s', a') - w * log pi(a'|s'))."""
    a2, logp2 = p.sample(batch.next_states, next_noise)
    q_next = p.q_values(p.targets, batch.next_states, a2).min(axis=0)
    soft = q_next - p.entropy_weight * logp2
    return batch.rewards + p.gamma * (1.0 - batch.terminals.astype(np.float64)) * soft


def critic_loss(p, j, batch, y):
    """MSE of critic j against fixed targets y; returns (loss, grads)."""
    net = p.critics[j]
    out, cache = net.forward_cached(np.concatenate([batch.states, batch.actions], axis=-1))
    loss, d_out = mse_loss(out, y[:, None])
    grads, _ = net.backward(cache, d_out)
    return loss, grads


def actor_loss(p, states, noise):
    """
    mean(w * log pi(a|s) - min_j Q_j(s, a)) with a reparameterised through
    fixed noise; returns (loss, actor grads).
    """
    n = states.shape[0]
    out, cache = p.actor.forward_cached(states)
    mu, log_std, d_clamp = p.head.split(out)
    sigma = np.exp(log_std)
    u = mu + sigma * noise
    th = np.tanh(u)
    a = p.action_high * th
    logp = gaussian_log_density(u, mu, log_std) + np.sum(_squash_correction(u) - np.log(p.action_high), axis=-1)

    x = np.concatenate([states, a], axis=-1)
    q_all, caches = [], []
    for c in p.critics:
        q, cc = c.forward_cached(x)
        q_all.append(q[:, 0])
        caches.append(cc)
    q_all = np.stack(q_all, axis=0)
    pick = np.argmin(q_all, axis=0)
    q_min = q_all[pick, np.arange(n)]
    w = p.entropy_weight
    loss = float(np.mean(w * logp - q_min))

    d_a = np.zeros_like(a)
    for j, (c, cc) in enumerate(zip(p.critics, caches)):
        rows = pick == j
        if not rows.any():
            continue
        g_out = np.zeros((n, 1))
        g_out[rows, 0] = -1.0 / n
        _, g_in = c.backward(cc, g_out)
        d_a += g_in[:, -p.action_dim:]
    # d log pi / du = 2 tanh(u); d u / d log_std = sigma * eps
    g_u = d_a * p.action_high * (1.0 - th ** 2) + (w / n) * 2.0 * th
    d_mu = g_u
    d_log_std = (g_u * sigma * noise - w / n) * d_clamp
    grads, _ = p.actor.backward(cache, np.concatenate([d_mu, d_log_std], axis=-1))
    return loss, grads


def _ema(target, source, tau):
    for t, s in zip(target.params, source.params):
        t *= 1.0 - tau
        t += tau * s


def _check_loss(loss, where):
    if not math.isfinite(loss):
        raise NumericError(f"loss is {loss}", where=where)


def policy_update(p, d_model, n_updates, batch_size, seed):
    """n_updates steps of critic regression, actor ascent and target EMA on D_model minibatches."""
    if n_updates <= 0:
        return p
    if len(d_model) < batch_size:
        raise InsufficientDataError(f"policy update needs {batch_size} samples, D_model holds {len(d_model)}")
    rng = as_rng(seed)
    for _ in range(n_updates):
        batch = d_model.as_batch(rng.integers(0, len(d_model), size=batch_size))
        y = critic_targets(p, batch, rng.standard_normal((batch_size, p.action_dim)))
        for j in range(len(p.critics)):
            loss, grads = critic_loss(p, j, batch, y)
            _check_loss(loss, f"critic {j}")
            opt_step(p.critics[j].params, grads, p.critic_opts[j], p.critic_lr)
        loss, grads = actor_loss(p, batch.states, rng.standard_normal((batch_size, p.action_dim)))
        _check_loss(loss, "actor")
        opt_step(p.actor.params, grads, p.actor_opt, p.actor_lr)
        for t, c in zip(p.targets, p.critics):
            _ema(t, c, p.tau)
        p.updates += 1
    return p


def run_episode(policy, env, seed, deterministic=True):
    """
    One episode on a private clone of `env`. Returns (transitions, return, flagged);
    flagged is True when the physics blew up and the episode was cut short.
    """
    e = env.clone()
    obs = e.reset(seed=seed)
    rng = make_rng(seed, "episode-actions")
    transitions, total, flagged = [], 0.0, False
    while not e.done:
        a = policy.act(obs, rng, deterministic=deterministic)
        try:
            tr = e.step(a)
        except NumericError as err:
            logger.warning(f"evaluation episode (seed {seed}) aborted: {err}")
            flagged = True
            break
        transitions.append(tr)
        total += tr.reward
        obs = tr.next_state
    return transitions, total, flagged


def evaluate_episodes(policy, env, n_episodes, seed, deterministic=True, workers=1):
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    seeds = [derive_seed(seed, "eval-episode", i) for i in range(n_episodes)]

    def run(s):
        return run_episode(policy, env, s, deterministic)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, seeds))
    return [run(s) for s in seeds]


def evaluate_policy(policy, env, n_episodes, seed, deterministic=True, workers=1):
    """Mean and std (ddof=0) of undiscounted episode returns."""
    results = evaluate_episodes(policy, env, n_episodes, seed, deterministic, workers)
    returns = np.array([r[1] for r in results])
    return float(returns.mean()), float(returns.std())


def random_policy_baseline(env, n_episodes, seed, workers=1):
    return evaluate_policy(RandomPolicy(env.action_high), env, n_episodes, seed, deterministic=False, workers=workers)


def save_policy(p, stem):
    named = dict(p.actor.state_dict("actor."))
    for j, (c, t) in enumerate(zip(p.critics, p.targets)):
        named.update(c.state_dict(f"critic{j}."))
        named.update(t.state_dict(f"target{j}."))
    meta = {
        "actor_widths": p.actor.widths,
        "critic_widths": p.critics[0].widths,
        "action_high": p.action_high.tolist(),
        "gamma": p.gamma,
        "entropy_weight": p.entropy_weight,
        "tau": p.tau,
        "actor_lr": p.actor_lr,
        "critic_lr": p.critic_lr,
        "updates": p.updates,
    }
    save_arrays(stem, named, meta)


def load_policy(stem):
    named, meta = load_arrays(stem)
    if "actor_widths" not in meta:
        raise CheckpointError(f"{stem} is not a policy checkpoint")
    actor = Mlp.from_state_dict(meta["actor_widths"], named, "actor.")
    critics = [Mlp.from_state_dict(meta["critic_widths"], named, f"critic{j}.") for j in range(2)]
    targets = [Mlp.from_state_dict(meta["critic_widths"], named, f"target{j}.") for j in range(2)]
    return PolicyParams(
        actor, critics, targets, np.array(meta["action_high"]), meta["gamma"], meta["entropy_weight"],
        meta["tau"], meta["actor_lr"], meta["critic_lr"], updates=meta["updates"],
    )
