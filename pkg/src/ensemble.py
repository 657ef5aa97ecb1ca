"""
Probabilistic dynamics-model ensemble.

Each member maps a normalised (s, a) to a Gaussian over the next-state delta
s' - s. Members are trained on bootstrap resamples of a shared training split
of D_env; the held-out validation split (shared by all members) is where the
model bias ||s + mu(s, a) - s'|| is measured. Model-dropout keeps the
ceil((1 - beta) N) members with the smallest bias; dropped members keep
training and may come back in a later epoch.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from src.core import coerce_batch, make_rng, as_rng, retained_count
from src.errors import CheckpointError, InsufficientDataError, MBDPError, NumericError, StaleBiasError
from src.tinynn import AdamState, GaussianHead, Mlp, grad, load_arrays, opt_step, save_arrays

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6


@dataclass
class DynamicsModel:
    model_id: int
    net: Mlp
    head: GaussianHead
    opt: AdamState
    rng: np.random.Generator = field(repr=False)
    in_mean: np.ndarray = None
    in_std: np.ndarray = None
    bias: float = None
    stale: bool = True
    train_nll: float = math.nan
    val_nll: float = math.nan
    skipped_steps: int = 0

    def __post_init__(self):
        n_in = self.net.widths[0]
        if self.in_mean is None:
            self.in_mean = np.zeros(n_in)
        if self.in_std is None:
            self.in_std = np.ones(n_in)

    @classmethod
    def create(cls, model_id, obs_dim, action_dim, hidden, seed):
        init_rng = make_rng(seed, "member-init", model_id)
        net = Mlp([obs_dim + action_dim, *hidden, 2 * obs_dim], rng=init_rng)
        return cls(model_id, net, GaussianHead(obs_dim), AdamState.for_params(net.params),
                   make_rng(seed, "member-train", model_id))

    @property
    def obs_dim(self):
        return self.head.dim

    def inputs(self, states, actions):
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=-1)
        return (x - self.in_mean) / self.in_std

    def fit_normalizer(self, states, actions):
        x = np.concatenate([states, actions], axis=-1)
        self.in_mean = x.mean(axis=0)
        self.in_std = np.maximum(x.std(axis=0), STD_FLOOR)

    def predict_delta(self, states, actions):
        """Mean and standard deviation of s' - s."""
        mu, log_std, _ = self.head.split(self.net.forward(self.inputs(states, actions)))
        return mu, np.exp(log_std)

    def predict_mean(self, states, actions):
        return np.atleast_2d(states) + self.predict_delta(states, actions)[0]

    def nll(self, batch):
        x = self.inputs(batch.states, batch.actions)
        return self.head.nll(self.net.forward(x), batch.next_states - batch.states)[0]


@dataclass
class EnsembleState:
    members: list
    retained: list = None  # Phi_beta as model ids, ascending bias
    beta: float = None
    validation: object = None  # TransitionBatch held out by the latest train_ensemble call

    def __len__(self):
        return len(self.members)

    @classmethod
    def create(cls, obs_dim, action_dim, size, hidden, seed):
        return cls([DynamicsModel.create(i, obs_dim, action_dim, hidden, seed) for i in range(size)])

    @property
    def retained_ids(self):
        return list(range(len(self.members))) if self.retained is None else list(self.retained)

    @property
    def dropped_ids(self):
        keep = set(self.retained_ids)
        return [m.model_id for m in self.members if m.model_id not in keep]

    @property
    def biases(self):
        return [m.bias for m in self.members]


def _train_member(m, train, val, steps, batch_size, lr, weight_decay):
    n = len(train)
    m.fit_normalizer(train.states, train.actions)
    x = m.inputs(train.states, train.actions)
    y = train.next_states - train.states
    boot = m.rng.integers(0, n, size=n)
    k = min(batch_size, n)
    for step in range(steps):
        idx = boot[m.rng.integers(0, n, size=k)]
        target = y[idx]
        try:
            _, grads = grad(m.net, x[idx], lambda out: m.head.nll(out, target))
            if weight_decay:
                for i in range(0, len(grads), 2):
                    grads[i] = grads[i] + weight_decay * m.net.params[i]
            opt_step(m.net.params, grads, m.opt, lr)
        except NumericError as e:
            m.skipped_steps += 1
            logger.warning(f"model {m.model_id}: skipped training step {step} ({e})")
    m.train_nll = float(m.head.nll(m.net.forward(x), y)[0])
    m.val_nll = float(m.nll(val))
    m.stale = True
    return m


def train_ensemble(ens, d_env, steps, seed=0, batch_size=128, validation_fraction=0.2,
                   min_transitions=100, lr=1e-3, weight_decay=0.0, workers=1):
    """
    Train every member `steps` minibatch steps on Gaussian NLL of the delta.
    The train/validation split is disjoint and shared; bootstrap resampling and
    minibatch order come from each member's own generator, so results do not
    depend on `workers`.
    """
    if steps <= 0:
        return ens
    if len(d_env) < min_transitions:
        raise InsufficientDataError(
            f"ensemble training needs at least {min_transitions} transitions, D_env holds {len(d_env)}"
        )
    data = d_env.as_batch()
    n = len(data)
    perm = make_rng(seed, "validation-split").permutation(n)
    n_val = min(max(1, int(round(validation_fraction * n))), n - 1)
    val, train = data.take(perm[:n_val]), data.take(perm[n_val:])
    ens.validation = val

    def run(m):
        return _train_member(m, train, val, steps, batch_size, lr, weight_decay)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, ens.members))
    else:
        for m in ens.members:
            run(m)
    return ens


def compute_bias(m, validation):
    """Mean L2 distance between s + mu(s, a) and the observed s'; clears staleness."""
    if validation is None or len(validation) == 0:
        raise InsufficientDataError("bias needs a nonempty validation set")
    val = coerce_batch(validation)
    pred = m.predict_mean(val.states, val.actions)
    bias = float(np.mean(np.linalg.norm(pred - val.next_states, axis=1)))
    if not math.isfinite(bias):
        raise NumericError(f"bias is {bias}", where=f"model {m.model_id}")
    m.bias = bias
    m.stale = False
    return bias


def compute_biases(ens, validation=None):
    validation = ens.validation if validation is None else validation
    return [compute_bias(m, validation) for m in ens.members]


def model_dropout(ens, beta):
    """Keep the ceil((1 - beta) N) lowest-bias members as Phi_beta (ties -> lower id)."""
    stale = [m.model_id for m in ens.members if m.stale or m.bias is None]
    if stale:
        raise StaleBiasError(f"bias of model(s) {stale} is stale; call compute_bias first")
    order = sorted(ens.members, key=lambda m: (m.bias, m.model_id))
    keep = retained_count(beta, len(order))
    ens.retained = [m.model_id for m in order[:keep]]
    ens.beta = beta
    return ens


def ensemble_predict(ens, s, a, seed, deterministic=False, return_members=False):
    """
    Next-state sample(s): one member drawn uniformly from Phi_beta per row, then
    s + mu + sigma * noise. `deterministic` returns s + mu with no noise.
    """
    ids = ens.retained_ids
    if not ids:
        raise MBDPError("model dropout subset is empty")
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    single = s.ndim == 1
    s2, a2 = np.atleast_2d(s), np.atleast_2d(a)
    rng = as_rng(seed)
    picks = np.asarray(ids)[rng.integers(0, len(ids), size=s2.shape[0])]
    noise = None if deterministic else rng.standard_normal(s2.shape)
    out = np.empty_like(s2)
    for mid in np.unique(picks):
        rows = picks == mid
        mu, std = ens.members[mid].predict_delta(s2[rows], a2[rows])
        out[rows] = s2[rows] + mu if deterministic else s2[rows] + mu + std * noise[rows]
    if single:
        out, picks = out[0], picks[0]
    return (out, picks) if return_members else out


def report_rows(ens, epoch):
    """Ensemble report rows: epoch, member_id, train_nll, val_nll, bias, retained."""
    keep = set(ens.retained_ids)
    return [
        {
            "epoch": epoch,
            "member_id": m.model_id,
            "train_nll": m.train_nll,
            "val_nll": m.val_nll,
            "bias": math.nan if m.bias is None else m.bias,
            "retained": m.model_id in keep,
        }
        for m in ens.members
    ]


def save_ensemble(ens, stem):
    named = {}
    for m in ens.members:
        named.update(m.net.state_dict(prefix=f"m{m.model_id}."))
        named[f"m{m.model_id}.in_mean"] = m.in_mean
        named[f"m{m.model_id}.in_std"] = m.in_std
    meta = {
        "widths": ens.members[0].net.widths,
        "obs_dim": ens.members[0].obs_dim,
        "size": len(ens),
        "retained": ens.retained,
        "biases": ens.biases,
    }
    save_arrays(stem, named, meta)


def load_ensemble(stem, seed=0):
    named, meta = load_arrays(stem)
    if "widths" not in meta:
        raise CheckpointError(f"{stem} is not an ensemble checkpoint")
    widths, obs_dim = meta["widths"], meta["obs_dim"]
    members = []
    for i in range(meta["size"]):
        net = Mlp.from_state_dict(widths, named, prefix=f"m{i}.")
        m = DynamicsModel(i, net, GaussianHead(obs_dim), AdamState.for_params(net.params),
                          make_rng(seed, "member-train", i),
                          in_mean=named[f"m{i}.in_mean"], in_std=named[f"m{i}.in_std"])
        bias = meta["biases"][i]
        m.bias, m.stale = bias, bias is None
        members.append(m)
    return EnsembleState(members, retained=meta.get("retained"))
