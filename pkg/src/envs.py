"""
Ground-truth dynamics.

Features:
- Pendulum swing-up (obs 3, action 1), PointMass2D reach (obs 4, action 2),
  CartPole with a continuous force (obs 4, action 1)
- Semi-implicit Euler integration with a fixed dt per environment
- Rewards rescaled into [0, 1] so the reward supremum R_m is exactly 1
- Mass / friction perturbation (robustness grid) as a pure function
- DiscreteMDP: a small finite MDP whose trajectory space is enumerated
  exactly; used as the oracle for every risk identity and bound

Environment constants:

    env          dt     horizon  mass (scaled)   friction (scaled)
    pendulum     0.05   200      pole mass 1.0   joint damping 0.1
    point_mass   0.1    100      body mass 1.0   linear drag 0.5
    cartpole     0.02   200      cart mass 1.0   cart friction 0.1
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from src.core import ReturnDistribution, Transition, as_rng
from src.errors import ConfigError, EnumerationCapError, MBDPError, NumericError

logger = logging.getLogger(__name__)

PERTURBATION_RANGE = (0.5, 1.5)
ENUMERATION_CAP = 1_000_000
PROB_TOL = 1e-12


@dataclass(frozen=True)
class PerturbationConfig:
    c_mass: float = 1.0
    c_friction: float = 1.0

    def __post_init__(self):
        lo, hi = PERTURBATION_RANGE
        problems = []
        for name in ("c_mass", "c_friction"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and lo <= v <= hi):
                problems.append(f"{name}={v!r}: must lie in [{lo}, {hi}]")
        if problems:
            raise ConfigError(problems)

    @property
    def is_identity(self):
        return self.c_mass == 1.0 and self.c_friction == 1.0


def perturbation_grid(masses, frictions):
    """Row-major list of PerturbationConfig over the two coefficient lists."""
    return [PerturbationConfig(float(m), float(f)) for m in masses for f in frictions]


def _angle_normalize(x):
    return ((x + np.pi) % (2.0 * np.pi)) - np.pi


class ContinuousEnv:
    """
    Base class. Subclasses define the physical state, its observation and the
    integrator; everything here is shared episode bookkeeping.
    """

    name = "base"
    obs_dim = 0
    action_dim = 0
    reward_sup = 1.0
    default_horizon = 100

    def __init__(self, mass, friction, dt, horizon=0, seed=0):
        self.mass = float(mass)
        self.friction = float(friction)
        self.dt = float(dt)
        self.horizon = int(horizon) if horizon else self.default_horizon
        self.action_high = np.ones(self.action_dim)
        self._rng = as_rng(seed)
        self._state = None
        self._t = 0
        self._done = True

    # Subclass hooks
    def _initial_state(self, rng):
        raise NotImplementedError

    def _observe(self, state):
        raise NotImplementedError

    def _integrate(self, state, action):
        raise NotImplementedError

    def reward(self, obs, action):
        """Vectorised r(s, a) over leading batch dimensions, in [0, reward_sup]."""
        raise NotImplementedError

    def is_terminal(self, obs):
        obs = np.asarray(obs)
        return np.zeros(obs.shape[:-1], dtype=bool)

    # Episode API
    @property
    def state(self):
        return None if self._state is None else self._state.copy()

    @property
    def obs(self):
        return self._observe(self._state)

    @property
    def done(self):
        return self._done

    @property
    def t(self):
        return self._t

    def reset(self, seed=None):
        if seed is not None:
            self._rng = as_rng(seed)
        self._state = self._initial_state(self._rng)
        self._t = 0
        self._done = False
        return self.obs

    def set_state(self, state):
        """Place the env in an explicit physical state (tests, start-state grids)."""
        self._state = np.array(state, dtype=np.float64)
        self._t = 0
        self._done = False
        return self.obs

    def clip_action(self, action):
        a = np.asarray(action, dtype=np.float64).reshape(self.action_dim)
        return np.clip(a, -self.action_high, self.action_high)

    def step(self, action):
        if self._done:
            raise MBDPError(f"{self.name}: step() called on a finished episode; call reset()")
        a = self.clip_action(action)
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite action", where=f"{self.name}.step")
        obs = self.obs
        r = float(self.reward(obs, a))
        new_state = self._integrate(self._state, a)
        if not np.all(np.isfinite(new_state)):
            self._done = True
            raise NumericError(f"state blew up at t={self._t}", where=f"{self.name}.step")
        self._state = new_state
        self._t += 1
        next_obs = self.obs
        terminal = bool(self.is_terminal(next_obs))
        self._done = terminal or self._t >= self.horizon
        return Transition(obs, a, r, next_obs, terminal)

    def clone(self):
        twin = type(self)(self.mass, self.friction, self.dt, self.horizon)
        twin._rng = np.random.default_rng()
        twin._rng.bit_generator.state = self._rng.bit_generator.state
        twin._state = None if self._state is None else self._state.copy()
        twin._t = self._t
        twin._done = self._done
        return twin

    def perturbed(self, p):
        twin = self.clone()
        twin.mass = self.mass * p.c_mass
        twin.friction = self.friction * p.c_friction
        return twin


class Pendulum(ContinuousEnv):
    """Torque-limited swing-up; upright is theta = 0. Physical state (theta, theta_dot)."""

    name = "pendulum"
    obs_dim = 3
    action_dim = 1
    default_horizon = 200
    gravity = 10.0
    length = 1.0
    max_speed = 8.0
    max_torque = 2.0
    cost_max = math.pi ** 2 + 0.1 * 8.0 ** 2 + 0.001 * 2.0 ** 2

    def __init__(self, mass=1.0, friction=0.1, dt=0.05, horizon=0, seed=0):
        super().__init__(mass, friction, dt, horizon, seed)
        self.action_high = np.full(1, self.max_torque)

    def _initial_state(self, rng):
        return np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])

    def _observe(self, state):
        return np.array([math.cos(state[0]), math.sin(state[0]), state[1]])

    def _integrate(self, state, action):
        th, thdot = state
        u = action[0]
        thdd = (3.0 * self.gravity / (2.0 * self.length) * math.sin(th)
                + 3.0 / (self.mass * self.length ** 2) * (u - self.friction * thdot))
        thdot = float(np.clip(thdot + thdd * self.dt, -self.max_speed, self.max_speed))
        return np.array([th + thdot * self.dt, thdot])

    def reward(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        th = np.arctan2(obs[..., 1], obs[..., 0])
        thdot = np.clip(obs[..., 2], -self.max_speed, self.max_speed)
        u = np.clip(action[..., 0], -self.max_torque, self.max_torque)
        cost = _angle_normalize(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
        return np.clip(1.0 - cost / self.cost_max, 0.0, 1.0)


class PointMass2D(ContinuousEnv):
    """Planar body pushed by a bounded force toward the origin. State (x, y, vx, vy)."""

    name = "point_mass"
    obs_dim = 4
    action_dim = 2
    default_horizon = 100

    def __init__(self, mass=1.0, friction=0.5, dt=0.1, horizon=0, seed=0):
        super().__init__(mass, friction, dt, horizon, seed)

    def _initial_state(self, rng):
        return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])

    def _observe(self, state):
        return state.copy()

    def acceleration(self, state, action):
        return (action - self.friction * state[2:]) / self.mass

    def _integrate(self, state, action):
        vel = state[2:] + self.acceleration(state, action) * self.dt
        pos = state[:2] + vel * self.dt
        return np.concatenate([pos, vel])

    def reward(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        return np.exp(-np.sum(obs[..., :2] ** 2, axis=-1))


class CartPole(ContinuousEnv):
    """Cart-pole balance with continuous force and cart friction. State (x, x_dot, theta, theta_dot)."""

    name = "cartpole"
    obs_dim = 4
    action_dim = 1
    default_horizon = 200
    gravity = 9.8
    pole_mass = 0.1
    half_length = 0.5
    force_mag = 10.0
    x_limit = 2.4
    theta_limit = 12 * 2 * math.pi / 360

    def __init__(self, mass=1.0, friction=0.1, dt=0.02, horizon=0, seed=0):
        super().__init__(mass, friction, dt, horizon, seed)

    def _initial_state(self, rng):
        return rng.uniform(-0.05, 0.05, size=4)

    def _observe(self, state):
        return state.copy()

    def _integrate(self, state, action):
        x, xdot, th, thdot = state
        force = action[0] * self.force_mag - self.friction * xdot
        total = self.mass + self.pole_mass
        pml = self.pole_mass * self.half_length
        cos, sin = math.cos(th), math.sin(th)
        temp = (force + pml * thdot ** 2 * sin) / total
        thacc = (self.gravity * sin - cos * temp) / (
            self.half_length * (4.0 / 3.0 - self.pole_mass * cos ** 2 / total))
        xacc = temp - pml * thacc * cos / total
        xdot = xdot + xacc * self.dt
        thdot = thdot + thacc * self.dt
        return np.array([x + xdot * self.dt, xdot, th + thdot * self.dt, thdot])

    def reward(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        r = 1.0 - 0.5 * (obs[..., 2] / self.theta_limit) ** 2 - 0.5 * (obs[..., 0] / self.x_limit) ** 2
        return np.clip(r, 0.0, 1.0)

    def is_terminal(self, obs):
        obs = np.asarray(obs)
        return (np.abs(obs[..., 0]) > self.x_limit) | (np.abs(obs[..., 2]) > self.theta_limit)


ENVS = {cls.name: cls for cls in (Pendulum, PointMass2D, CartPole)}


def make_env(name, c_mass=1.0, c_friction=1.0, horizon=0, seed=0):
    if name not in ENVS:
        raise ConfigError(f"env.name={name!r}: expected one of {sorted(ENVS)}")
    env = ENVS[name](horizon=horizon, seed=seed)
    p = PerturbationConfig(c_mass, c_friction)
    return env if p.is_identity else env.perturbed(p)


def env_step(env, action):
    return env.step(action)


def env_perturb(env, p):
    """New env with mass * c_mass and friction * c_friction; `env` is left untouched."""
    if not isinstance(p, PerturbationConfig):
        p = PerturbationConfig(*p)
    return env.perturbed(p)


def episode_frame(transitions):
    """Episode log as a DataFrame with columns t, s_*, a_*, r."""
    rows = []
    for t, tr in enumerate(transitions):
        row = {"t": t}
        row.update({f"s_{j}": v for j, v in enumerate(tr.state)})
        row.update({f"a_{j}": v for j, v in enumerate(tr.action)})
        row["r"] = tr.reward
        rows.append(row)
    return pd.DataFrame(rows)


# =============================================================================
# Enumerable finite MDP
# =============================================================================

@dataclass
class DiscreteMDP:
    """
    Finite-horizon MDP over states s_0..s_T. The return of one trajectory is
    sum_{t=0}^{T} gamma^t r(s_t, a_t), so there are (S*A)^(T+1) trajectories.
    """

    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray  # (S, A)
    initial: np.ndarray  # (S,)
    horizon: int
    gamma: float
    reward_sup: float = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        s, a = self.rewards.shape
        if self.transitions.shape != (s, a, s) or self.initial.shape != (s,):
            raise ValueError("transition tensor, reward table and initial distribution disagree in shape")
        if np.any(self.transitions < 0) or np.any(np.abs(self.transitions.sum(axis=2) - 1.0) > PROB_TOL):
            raise ValueError("every (s, a) transition row must be a distribution (sum 1 within 1e-12)")
        if np.any(self.initial < 0) or abs(self.initial.sum() - 1.0) > PROB_TOL:
            raise ValueError("initial distribution must sum to 1")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.reward_sup is None:
            self.reward_sup = float(np.max(np.abs(self.rewards)))
        if np.any(np.abs(self.rewards) > self.reward_sup + 1e-12):
            raise ValueError(f"rewards exceed the declared supremum {self.reward_sup}")

    @property
    def n_states(self):
        return self.rewards.shape[0]

    @property
    def n_actions(self):
        return self.rewards.shape[1]

    @property
    def trajectory_count(self):
        return (self.n_states * self.n_actions) ** (self.horizon + 1)

    def check_policy(self, policy):
        policy = np.asarray(policy, dtype=np.float64)
        if policy.shape != self.rewards.shape:
            raise ValueError(f"policy shape {policy.shape} does not match (S, A) = {self.rewards.shape}")
        if np.any(policy < 0) or np.any(np.abs(policy.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("policy rows must be action distributions")
        return policy


def trajectory_returns(mdp, policy, cap=ENUMERATION_CAP):
    """
    Raw (returns, probs) over every positive-probability trajectory.
    Expansion is breadth-first over prefixes, one numpy array per level.
    """
    policy = mdp.check_policy(policy)
    required = mdp.trajectory_count
    if required > cap:
        raise EnumerationCapError(required, cap)
    states = np.flatnonzero(mdp.initial > 0)
    probs = mdp.initial[states]
    rets = np.zeros(states.size)
    n_a, n_s = mdp.n_actions, mdp.n_states
    for t in range(mdp.horizon + 1):
        s_rep = np.repeat(states, n_a)
        a_rep = np.tile(np.arange(n_a), states.size)
        probs = np.repeat(probs, n_a) * policy[s_rep, a_rep]
        rets = np.repeat(rets, n_a) + mdp.gamma ** t * mdp.rewards[s_rep, a_rep]
        keep = probs > 0
        s_rep, a_rep, probs, rets = s_rep[keep], a_rep[keep], probs[keep], rets[keep]
        if t == mdp.horizon:
            break
        nxt = mdp.transitions[s_rep, a_rep].ravel()
        states = np.tile(np.arange(n_s), s_rep.size)
        probs = np.repeat(probs, n_s) * nxt
        rets = np.repeat(rets, n_s)
        keep = probs > 0
        states, probs, rets = states[keep], probs[keep], rets[keep]
    total = probs.sum()
    if abs(total - 1.0) > 1e-9:
        raise NumericError(f"trajectory probabilities sum to {total!r}", where="mdp enumeration")
    return rets, probs / total


def mdp_enumerate_returns(mdp, policy, cap=ENUMERATION_CAP, merge=True):
    rets, probs = trajectory_returns(mdp, policy, cap)
    return ReturnDistribution.from_samples(rets, probs, merge=merge)


def exact_value(mdp, policy):
    """V^{pi,P} by backward induction (independent of trajectory enumeration)."""
    policy = mdp.check_policy(policy)
    v = np.zeros(mdp.n_states)
    for t in range(mdp.horizon, -1, -1):
        q = mdp.rewards.copy()
        if t < mdp.horizon:
            q = q + mdp.gamma * mdp.transitions @ v
        v = np.sum(policy * q, axis=1)
    return float(mdp.initial @ v)


def mdp_sample_returns(mdp, policy, n_episodes, seed):
    """Monte Carlo returns of n_episodes, simulated in lockstep."""
    policy = mdp.check_policy(policy)
    rng = as_rng(seed)
    s = rng.choice(mdp.n_states, size=n_episodes, p=mdp.initial)
    rets = np.zeros(n_episodes)
    cum_pi = np.cumsum(policy, axis=1)
    cum_p = np.cumsum(mdp.transitions, axis=2)
    for t in range(mdp.horizon + 1):
        a = np.minimum((rng.random(n_episodes)[:, None] > cum_pi[s]).sum(axis=1), mdp.n_actions - 1)
        rets += mdp.gamma ** t * mdp.rewards[s, a]
        if t < mdp.horizon:
            s = np.minimum((rng.random(n_episodes)[:, None] > cum_p[s, a]).sum(axis=1), mdp.n_states - 1)
    return rets


def random_mdp(seed, n_states=None, n_actions=None, horizon=None, gamma=None,
               reward_sup=1.0, cap=ENUMERATION_CAP):
    """
    Seeded random enumerable MDP: <= 4 states, <= 3 actions, horizon <= 4,
    Dirichlet transition rows, rewards uniform on [0, reward_sup].
    Unspecified sizes are drawn and then shrunk until enumeration fits the cap.
    """
    rng = as_rng(seed)
    n_s = n_states or int(rng.integers(1, 5))
    n_a = n_actions or int(rng.integers(1, 4))
    T = horizon if horizon is not None else int(rng.integers(1, 5))
    while (n_s * n_a) ** (T + 1) > cap and T > 0 and horizon is None:
        T -= 1
    g = gamma if gamma is not None else float(rng.uniform(0.5, 0.99))
    P = rng.dirichlet(np.ones(n_s), size=(n_s, n_a))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, reward_sup, size=(n_s, n_a))
    init = rng.dirichlet(np.ones(n_s))
    init /= init.sum()
    return DiscreteMDP(P, R, init, T, g, reward_sup)


def random_policy(mdp, seed):
    pi = as_rng(seed).dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    return pi / pi.sum(axis=1, keepdims=True)


def chain_mdp(reward, horizon, gamma):
    """One state, one action, constant reward: a single deterministic trajectory."""
    return DiscreteMDP(np.ones((1, 1, 1)), np.full((1, 1), float(reward)), np.ones(1),
                       horizon, gamma, abs(float(reward)) or 1.0)
