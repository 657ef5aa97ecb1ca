"""
Minimal feed-forward network stack with hand-written reverse-mode gradients.

Supported primitives: affine layers, tanh hidden activations, exp/log,
soft clamping, squares, sums/means and the Gaussian log-density. Every loss
used by the ensemble and the agent is composed from these, so each one can
be gradient-checked against central finite differences.

Checkpoint layout: `<stem>.bin` holds every array as little-endian float64,
row-major, concatenated in manifest order; `<stem>.json` lists name, shape
and element offset of each array.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from src.errors import CheckpointError, NumericError

LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = math.log(10.0)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Mlp:
    """Tanh MLP: affine -> tanh -> ... -> affine (linear output)."""

    def __init__(self, widths, rng=None, weights=None, biases=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        self.widths = widths
        if weights is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weights, biases = [], []
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                bound = 1.0 / math.sqrt(fan_in)
                weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                biases.append(rng.uniform(-bound, bound, size=fan_out))
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def zeros(cls, widths):
        widths = [int(w) for w in widths]
        return cls(
            widths,
            weights=[np.zeros((i, o)) for i, o in zip(widths[:-1], widths[1:])],
            biases=[np.zeros(o) for o in widths[1:]],
        )

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_params(self):
        return sum(i * o + o for i, o in zip(self.widths[:-1], self.widths[1:]))

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_params(self, params):
        self.weights = [np.asarray(p, dtype=np.float64) for p in params[0::2]]
        self.biases = [np.asarray(p, dtype=np.float64) for p in params[1::2]]

    def copy(self):
        return Mlp(self.widths, weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases])

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        out, pos = [], 0
        for p in self.params:
            out.append(flat[pos:pos + p.size].reshape(p.shape).copy())
            pos += p.size
        self.set_params(out)

    @staticmethod
    def flatten(arrays):
        return np.concatenate([np.asarray(a).ravel() for a in arrays])

    def forward_cached(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"input dim {x.shape[-1]} does not match first layer width {self.widths[0]}")
        inputs, h = [], x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            if not np.all(np.isfinite(h)):
                raise NumericError("non-finite activation in forward pass", where=f"layer {i}")
        return (h[0] if squeeze else h), (inputs, h, squeeze)

    def forward(self, x):
        return self.forward_cached(x)[0]

    def backward(self, cache, grad_out):
        """Gradients of a scalar loss w.r.t. params (same order as `params`) and the input."""
        inputs, out, squeeze = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if squeeze:
            g = g[None, :]
        grads = [None] * (2 * self.n_layers)
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            if i != last:
                # inputs[i + 1] is tanh(z_i)
                g = g * (1.0 - inputs[i + 1] ** 2)
            grads[2 * i] = inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, (g[0] if squeeze else g)

    def state_dict(self, prefix=""):
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"{prefix}W{i}"] = w
            named[f"{prefix}b{i}"] = b
        return named

    @classmethod
    def from_state_dict(cls, widths, named, prefix=""):
        n = len(widths) - 1
        try:
            weights = [named[f"{prefix}W{i}"] for i in range(n)]
            biases = [named[f"{prefix}b{i}"] for i in range(n)]
        except KeyError as e:
            raise CheckpointError(f"missing array {e} in checkpoint")
        net = cls(widths, weights=weights, biases=biases)
        for w, (i, o) in zip(net.weights, zip(widths[:-1], widths[1:])):
            if w.shape != (i, o):
                raise CheckpointError(f"weight shape {w.shape} does not match widths {widths}")
        return net


def forward(net, x):
    return net.forward(x)


def grad(net, inputs, loss_fn):
    """
    Loss and parameter gradients for `loss_fn(outputs) -> (loss, d loss / d outputs)`.
    """
    out, cache = net.forward_cached(inputs)
    loss, d_out = loss_fn(out)
    if not math.isfinite(loss):
        raise NumericError(f"loss is {loss}", where="loss")
    grads, _ = net.backward(cache, d_out)
    return loss, grads


def softplus(x):
    return np.logaddexp(0.0, x)


def soft_clamp(raw, lo, hi):
    """Smoothly squash `raw` into (lo, hi); returns value and elementwise derivative."""
    upper = hi - softplus(hi - raw)
    d_upper = expit(hi - raw)
    val = lo + softplus(upper - lo)
    d_val = expit(upper - lo) * d_upper
    return val, d_val


@dataclass
class GaussianHead:
    """Splits an output of width 2*dim into a mean and a clamped log standard deviation."""

    dim: int
    log_std_min: float = LOG_STD_MIN
    log_std_max: float = LOG_STD_MAX

    def split(self, y):
        mu = y[..., :self.dim]
        log_std, d_log_std = soft_clamp(y[..., self.dim:], self.log_std_min, self.log_std_max)
        return mu, log_std, d_log_std

    def nll(self, y, target):
        """Mean over the batch of the summed per-dimension Gaussian negative log-likelihood."""
        mu, log_std, d_log_std = self.split(y)
        n = y.shape[0]
        inv_var = np.exp(-2.0 * log_std)
        err = target - mu
        z2 = err * err * inv_var
        loss = float(np.sum(0.5 * z2 + log_std + _HALF_LOG_2PI) / n)
        d_mu = -err * inv_var / n
        d_ls = (1.0 - z2) / n * d_log_std
        return loss, np.concatenate([d_mu, d_ls], axis=-1)


def gaussian_log_density(x, mu, log_std):
    z = (x - mu) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI, axis=-1)


def mse_loss(pred, target):
    err = pred - target
    n = pred.shape[0]
    return float(np.sum(err * err) / n), 2.0 * err / n


def l2_penalty(params, coef=1.0):
    """0.5 * coef * ||theta||^2 and its gradient coef * theta."""
    loss = 0.5 * coef * sum(float(np.sum(p * p)) for p in params)
    return loss, [coef * p for p in params]


def numerical_grad(fn, theta, indices, h=1e-5):
    """Central finite differences of scalar fn(theta) at the given flat indices."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.zeros(len(indices))
    for j, idx in enumerate(indices):
        plus = theta.copy()
        minus = theta.copy()
        plus[idx] += h
        minus[idx] -= h
        out[j] = (fn(plus) - fn(minus)) / (2.0 * h)
    return out


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])

    def copy(self):
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v], self.t,
                         self.beta1, self.beta2, self.eps)


def opt_step(params, grads, state, lr):
    """
    One Adam step. Params and state are updated in place and returned.
    Non-finite gradients raise before anything is modified.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", where="optimizer")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params, state


def save_arrays(stem, named, meta=None):
    """Write `<stem>.bin` + `<stem>.json` (see module docstring for the layout)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "float64-le", "order": "row-major", "arrays": [], "meta": meta or {}}
    offset = 0
    chunks = []
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest["arrays"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.ravel())
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    flat.astype("<f8").tofile(stem.with_suffix(".bin"))
    with open(stem.with_suffix(".json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_arrays(stem):
    stem = Path(stem)
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    if not bin_path.exists() or not json_path.exists():
        raise CheckpointError(f"checkpoint {stem} not found")
    with open(json_path, "r") as f:
        manifest = json.load(f)
    flat = np.fromfile(bin_path, dtype="<f8")
    named = {}
    for entry in manifest["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        if start + size > flat.size:
            raise CheckpointError(f"checkpoint {stem} is truncated at array '{entry['name']}'")
        named[entry["name"]] = flat[start:start + size].reshape(entry["shape"]).astype(np.float64)
    return named, manifest.get("meta", {})
