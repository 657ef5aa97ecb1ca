"""
Run configuration.

A run is described by one JSON file with nested sections mirroring the
hyperparameter table columns (epochs, env steps per epoch, rollout batch,
policy/model updates per env step, alpha, beta, gamma, ensemble size, network
arch). Values are layered: defaults < file < command-line overrides.

Scaled-down defaults versus the published MuJoCo settings:

    column                       published      default here (pendulum)
    epochs                       120-400        30
    env steps per epoch          1000           200
    rollout batch                1e5            n_starts * k_per_start * horizon = 1200
    policy updates per env step  20-40          5
    model updates per env step   250            1
    alpha / beta / gamma         0.2/0.2/0.99   0.2/0.2/0.99
    ensemble size                10             5
    network arch                 MLP 4x200      MLP 2x64

Buffer capacities are not published; the defaults below are our own choice.
"""

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from src.errors import ConfigError

OUTPUT_ROOT_ENV = "MBDP_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

KNOWN_ENVS = ("pendulum", "point_mass", "cartpole")
DROPOUT_MODES = ("sample", "trajectory")

# Flexible robustness / efficiency control
PRESETS = {
    "balanced": {"alpha": 0.2, "beta": 0.2},
    "robust": {"alpha": 0.4, "beta": 0.1},
    "efficient": {"alpha": 0.1, "beta": 0.4},
}


@dataclass
class EnvSection:
    name: str = "pendulum"
    c_mass: float = 1.0
    c_friction: float = 1.0
    horizon: int = 0  # 0 keeps the environment's own episode length


@dataclass
class ScheduleSection:
    epochs: int = 30
    env_steps_per_epoch: int = 200
    n_train: int = 1
    policy_updates_per_env_step: int = 5
    model_updates_per_env_step: int = 1
    init_random_steps: int = 400
    eval_episodes: int = 10
    checkpoint_every: int = 5


@dataclass
class DropoutSection:
    alpha: float = 0.2
    beta: float = 0.2
    gamma: float = 0.99
    min_group_size: int = 5
    mode: str = "sample"


@dataclass
class EnsembleSection:
    size: int = 5
    hidden: list = field(default_factory=lambda: [64, 64])
    lr: float = 1e-3
    batch_size: int = 128
    validation_fraction: float = 0.2
    min_transitions: int = 100
    weight_decay: float = 1e-5


@dataclass
class RolloutSection:
    n_starts: int = 50
    k_per_start: int = 8
    horizon: int = 3


@dataclass
class AgentSection:
    hidden: list = field(default_factory=lambda: [64, 64])
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    entropy_weight: float = 0.05
    tau: float = 0.005
    batch_size: int = 128


@dataclass
class BuffersSection:
    env_capacity: int = 100_000
    model_capacity: int = 50_000


@dataclass
class BoundsSection:
    lipschitz_k: float = None  # None -> heuristic estimate from the critic
    lipschitz_pairs: int = 1000
    lipschitz_states: int = 200


@dataclass
class Config:
    seed: int = 0
    env: EnvSection = field(default_factory=EnvSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    dropout: DropoutSection = field(default_factory=DropoutSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    agent: AgentSection = field(default_factory=AgentSection)
    buffers: BuffersSection = field(default_factory=BuffersSection)
    bounds: BoundsSection = field(default_factory=BoundsSection)

    def to_dict(self):
        return asdict(self)

    def copy(self):
        return copy.deepcopy(self)


def _fill(section, data, prefix, problems):
    known = {f.name: f for f in fields(section)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in known:
            problems.append(f"{path}: unknown key")
            continue
        current = getattr(section, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                problems.append(f"{path}: expected a section (object)")
                continue
            _fill(current, value, f"{path}.", problems)
        else:
            setattr(section, key, value)


def config_from_dict(data):
    cfg = Config()
    problems = []
    _fill(cfg, data or {}, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})")
    return config_from_dict(data)


def _parse_scalar(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, overrides):
    """
    Apply dotted-key overrides such as {"dropout.alpha": 0.3}.
    String values are parsed as JSON when possible ("0.3" -> 0.3, "[32, 32]" -> list).
    """
    cfg = cfg.copy()
    problems = []
    for dotted, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, str):
            value = _parse_scalar(value)
        parts = dotted.split(".")
        target = cfg
        ok = True
        for part in parts[:-1]:
            if not hasattr(target, part) or not is_dataclass(getattr(target, part)):
                problems.append(f"{dotted}: unknown section '{part}'")
                ok = False
                break
            target = getattr(target, part)
        if not ok:
            continue
        if not hasattr(target, parts[-1]):
            problems.append(f"{dotted}: unknown key")
            continue
        setattr(target, parts[-1], value)
    if problems:
        raise ConfigError(problems)
    return cfg


def apply_preset(cfg, name):
    if name not in PRESETS:
        raise ConfigError(f"preset '{name}': expected one of {sorted(PRESETS)}")
    return apply_overrides(cfg, {f"dropout.{k}": v for k, v in PRESETS[name].items()})


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_config(cfg):
    """Return a list of per-field problems (empty when the config is usable)."""
    p = []

    def need_int(path, v, lo=0):
        if not _is_int(v) or v < lo:
            p.append(f"{path}={v!r}: expected an integer >= {lo}")

    def need_range(path, v, lo, hi, lo_open=False, hi_open=False):
        if not _is_num(v):
            p.append(f"{path}={v!r}: expected a number")
            return
        bad_lo = v <= lo if lo_open else v < lo
        bad_hi = v >= hi if hi_open else v > hi
        if bad_lo or bad_hi:
            lb = "(" if lo_open else "["
            rb = ")" if hi_open else "]"
            p.append(f"{path}={v}: must lie in {lb}{lo}, {hi}{rb}")

    need_int("seed", cfg.seed)
    if cfg.env.name not in KNOWN_ENVS:
        p.append(f"env.name={cfg.env.name!r}: expected one of {list(KNOWN_ENVS)}")
    need_range("env.c_mass", cfg.env.c_mass, 0.5, 1.5)
    need_range("env.c_friction", cfg.env.c_friction, 0.5, 1.5)
    need_int("env.horizon", cfg.env.horizon)

    s = cfg.schedule
    need_int("schedule.epochs", s.epochs)
    need_int("schedule.env_steps_per_epoch", s.env_steps_per_epoch, 1)
    need_int("schedule.n_train", s.n_train, 1)
    need_int("schedule.policy_updates_per_env_step", s.policy_updates_per_env_step)
    need_int("schedule.model_updates_per_env_step", s.model_updates_per_env_step, 1)
    need_int("schedule.init_random_steps", s.init_random_steps)
    need_int("schedule.eval_episodes", s.eval_episodes, 1)
    need_int("schedule.checkpoint_every", s.checkpoint_every)

    d = cfg.dropout
    need_range("dropout.alpha", d.alpha, 0.0, 1.0, hi_open=True)
    need_range("dropout.beta", d.beta, 0.0, 1.0, hi_open=True)
    need_range("dropout.gamma", d.gamma, 0.0, 1.0, lo_open=True, hi_open=True)
    need_int("dropout.min_group_size", d.min_group_size, 1)
    if d.mode not in DROPOUT_MODES:
        p.append(f"dropout.mode={d.mode!r}: expected one of {list(DROPOUT_MODES)}")

    e = cfg.ensemble
    need_int("ensemble.size", e.size, 1)
    need_range("ensemble.lr", e.lr, 0.0, 1.0, lo_open=True)
    need_int("ensemble.batch_size", e.batch_size, 1)
    need_range("ensemble.validation_fraction", e.validation_fraction, 0.0, 1.0, lo_open=True, hi_open=True)
    need_int("ensemble.min_transitions", e.min_transitions, 2)
    need_range("ensemble.weight_decay", e.weight_decay, 0.0, 1.0)
    for path, hidden in (("ensemble.hidden", e.hidden), ("agent.hidden", cfg.agent.hidden)):
        if not isinstance(hidden, list) or not hidden or not all(_is_int(w) and w > 0 for w in hidden):
            p.append(f"{path}={hidden!r}: expected a nonempty list of positive integers")

    r = cfg.rollout
    need_int("rollout.n_starts", r.n_starts, 1)
    need_int("rollout.k_per_start", r.k_per_start, 1)
    need_int("rollout.horizon", r.horizon, 1)

    a = cfg.agent
    need_range("agent.actor_lr", a.actor_lr, 0.0, 1.0, lo_open=True)
    need_range("agent.critic_lr", a.critic_lr, 0.0, 1.0, lo_open=True)
    need_range("agent.entropy_weight", a.entropy_weight, 0.0, 10.0)
    need_range("agent.tau", a.tau, 0.0, 1.0, lo_open=True)
    need_int("agent.batch_size", a.batch_size, 1)

    need_int("buffers.env_capacity", cfg.buffers.env_capacity, 1)
    need_int("buffers.model_capacity", cfg.buffers.model_capacity, 1)

    b = cfg.bounds
    if b.lipschitz_k is not None and (not _is_num(b.lipschitz_k) or b.lipschitz_k < 0):
        p.append(f"bounds.lipschitz_k={b.lipschitz_k!r}: expected null or a number >= 0")
    need_int("bounds.lipschitz_pairs", b.lipschitz_pairs, 1)
    need_int("bounds.lipschitz_states", b.lipschitz_states, 2)
    return p


def ensure_valid(cfg):
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def default_output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def save_config(cfg, path):
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
