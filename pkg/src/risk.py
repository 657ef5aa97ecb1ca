"""
Risk measures, exact dropout values and the discrepancy bounds.

Tail convention used throughout:

- exact_v_alpha keeps the lowest (1 - alpha) probability mass of the return
  distribution, splitting the boundary atom so the kept mass is exact.
- cvar_p(Z, p) is E[Z | Z >= VaR_p(Z)] with the boundary atom counted in full;
  with split_boundary=True it is the mean of the top (1 - p) mass instead.
  -cvar_p(-Z, alpha, split_boundary=True) == exact_v_alpha.
- The adversary reweights trajectories by a density delta with
  E_P[delta] = 1 and delta <= 1 / (1 - alpha); its worst case over that set
  is again exact_v_alpha. alpha = 0 leaves no room (delta == 1).
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linprog
from tqdm import tqdm

from src.core import DropoutConfig, ReturnDistribution, as_rng, make_rng
from src.ensemble import compute_bias
from src.envs import exact_value, mdp_enumerate_returns, random_mdp, random_policy, trajectory_returns
from src.errors import MBDPError, NumericError, StaleBiasError

logger = logging.getLogger(__name__)

CUM_TOL = 1e-12
LP_TRAJECTORY_LIMIT = 2000
LP_TOLERANCE = 1e-7
DEFAULT_ALPHAS = (0.1, 0.25, 0.5)

__all__ = [
    "ReturnDistribution", "PerturbationSet", "BoundsReport", "CheckResult",
    "var_p", "cvar_p", "lower_tail_mean", "exact_v_alpha", "adversary_sup", "adversary_sup_lp",
    "eps_alpha", "discrepancy_bound", "model_gap_bound", "estimate_eps_M", "residual",
    "estimate_lipschitz_K", "bounds_report", "verify_theory",
]


def _check_p(p):
    if not 0.0 < p < 1.0:
        raise ValueError(f"p={p}: must lie strictly inside (0, 1)")


def var_p(dist, p):
    """inf{z : F(z) >= p}."""
    _check_p(p)
    cum = np.cumsum(dist.probs)
    i = int(np.searchsorted(cum, p - CUM_TOL, side="left"))
    return float(dist.values[min(i, dist.values.size - 1)])


def _upper_tail_mean(values, probs, mass):
    """Mean of the top `mass` probability, boundary atom split."""
    remaining = mass
    total = 0.0
    for v, q in zip(values[::-1], probs[::-1]):
        take = min(q, remaining)
        total += take * v
        remaining -= take
        if remaining <= 0.0:
            break
    return total / mass


def cvar_p(dist, p, split_boundary=False):
    _check_p(p)
    if split_boundary:
        return float(_upper_tail_mean(dist.values, dist.probs, 1.0 - p))
    tail = dist.values >= var_p(dist, p)
    return float(np.dot(dist.values[tail], dist.probs[tail]) / dist.probs[tail].sum())


def lower_tail_mean(dist, mass):
    """Mean of the lowest `mass` probability of the distribution, boundary atom split."""
    if not 0.0 < mass <= 1.0:
        raise ValueError(f"mass={mass}: must lie in (0, 1]")
    cum = np.cumsum(dist.probs)
    before = np.concatenate([[0.0], cum[:-1]])
    take = np.clip(mass - before, 0.0, dist.probs)
    return float(np.dot(take, dist.values) / mass)


def exact_v_alpha(mdp, policy, alpha):
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha={alpha}: must satisfy 0 <= alpha < 1")
    return lower_tail_mean(mdp_enumerate_returns(mdp, policy), 1.0 - alpha)


@dataclass(frozen=True)
class PerturbationSet:
    """Trajectory reweightings delta with E_P[delta] = 1 and 0 <= delta <= 1 / (1 - alpha)."""

    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha={self.alpha}: must satisfy 0 <= alpha < 1")

    @property
    def density_cap(self):
        return 1.0 / (1.0 - self.alpha)

    def admissible(self, delta, probs, tol=1e-9):
        delta = np.asarray(delta, dtype=np.float64)
        return bool(
            np.all(delta >= -tol)
            and np.all(delta <= self.density_cap + tol)
            and abs(float(np.dot(delta, probs)) - 1.0) <= tol
        )

    def worst_case(self, returns, probs):
        """
        Greedy adversary: pile density up to the cap on the lowest returns until
        the unit budget is spent. Returns (value, delta).
        """
        returns = np.asarray(returns, dtype=np.float64)
        probs = np.asarray(probs, dtype=np.float64)
        order = np.argsort(returns, kind="stable")
        cap = self.density_cap
        weight = np.zeros_like(probs)
        budget = 1.0
        for i in order:
            w = min(cap * probs[i], budget)
            weight[i] = w
            budget -= w
            if budget <= 0.0:
                break
        delta = np.divide(weight, probs, out=np.zeros_like(probs), where=probs > 0)
        return float(np.dot(weight, returns)), delta


def adversary_sup(mdp, policy, alpha):
    """
    Value of the pessimistic objective under the strongest admissible
    perturbation: sup over delta of E_P[delta * (-G)], reported as a return.
    """
    returns, probs = trajectory_returns(mdp, policy)
    return PerturbationSet(alpha).worst_case(returns, probs)[0]


def adversary_sup_lp(mdp, policy, alpha):
    """Same quantity as adversary_sup, solved as a linear program over per-trajectory weights."""
    returns, probs = trajectory_returns(mdp, policy)
    cap = PerturbationSet(alpha).density_cap
    res = linprog(
        c=returns,
        A_eq=np.ones((1, returns.size)),
        b_eq=[1.0],
        bounds=[(0.0, min(1.0, cap * q)) for q in probs],
        method="highs",
    )
    if not res.success:
        raise NumericError(f"linprog failed: {res.message}", where="adversary LP")
    return float(res.fun)


def eps_alpha(cfg):
    """alpha (1 + alpha) / ((1 - alpha)(1 - gamma)) * R_m."""
    a, g = cfg.alpha, cfg.gamma
    return a * (1.0 + a) / ((1.0 - a) * (1.0 - g)) * cfg.reward_sup


def discrepancy_bound(cfg, eps_M, K):
    """(1 - beta) gamma K / (1 - gamma) * eps_M + (1 - beta) * eps_alpha(cfg)."""
    if eps_M < 0 or K < 0:
        raise ValueError("eps_M and K must be nonnegative")
    keep = 1.0 - cfg.beta
    return keep * cfg.gamma * K / (1.0 - cfg.gamma) * eps_M + keep * eps_alpha(cfg)


def model_gap_bound(gamma, K, bias):
    """Single-model value gap gamma / (1 - gamma) * K * bias."""
    return gamma / (1.0 - gamma) * K * bias


def estimate_eps_M(ens, validation=None):
    """Mean bias over the full ensemble (not only Phi_beta)."""
    if validation is not None:
        for m in ens.members:
            compute_bias(m, validation)
    stale = [m.model_id for m in ens.members if m.stale or m.bias is None]
    if stale:
        raise StaleBiasError(f"bias of model(s) {stale} is stale")
    return float(np.mean([m.bias for m in ens.members]))


def residual(v_env, v_alpha_model, d_bound, cfg):
    """(eps_k, eta) with eps_k = v_env - (v_alpha_model - d_bound) and eta = eps_k - eps_alpha."""
    eps_k = v_env - (v_alpha_model - d_bound)
    return eps_k, eps_k - eps_alpha(cfg)


def estimate_lipschitz_K(value_fn, states, pairs=1000, seed=0):
    """
    Heuristic lower bound on K: max |V(s) - V(s')| / ||s - s'|| over `pairs`
    sampled pairs. A larger budget only adds pairs, so the estimate is
    nondecreasing in `pairs` for a fixed seed.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[:, None]
    if states.shape[0] < 2:
        raise MBDPError("Lipschitz estimate needs at least two states")
    values = np.asarray(value_fn(states), dtype=np.float64).ravel()
    idx = as_rng(seed).integers(0, states.shape[0], size=(pairs, 2))
    dist = np.linalg.norm(states[idx[:, 0]] - states[idx[:, 1]], axis=1)
    ok = dist > 1e-12
    if not ok.any():
        raise MBDPError("every sampled state pair is coincident")
    return float(np.max(np.abs(values[idx[ok, 0]] - values[idx[ok, 1]]) / dist[ok]))


@dataclass
class BoundsReport:
    epoch: int
    eps_alpha: float
    eps_M: float
    lipschitz_K: float
    lipschitz_estimated: bool
    D_alpha_beta: float
    model_gap: float
    V_env: float
    V_alpha_model: float
    eps_k: float
    eta: float

    def __post_init__(self):
        if self.eps_alpha < 0 or self.D_alpha_beta < 0:
            raise NumericError("negative bound", where=f"bounds epoch {self.epoch}")
        for k, v in asdict(self).items():
            if isinstance(v, float) and not math.isfinite(v):
                raise NumericError(f"{k} is {v}", where=f"bounds epoch {self.epoch}")

    def as_row(self):
        return asdict(self)


def bounds_report(epoch, cfg, eps_M, K, v_env, v_alpha_model, K_estimated=False):
    d = discrepancy_bound(cfg, eps_M, K)
    eps_k, eta = residual(v_env, v_alpha_model, d, cfg)
    return BoundsReport(
        epoch=epoch, eps_alpha=eps_alpha(cfg), eps_M=eps_M, lipschitz_K=K,
        lipschitz_estimated=K_estimated, D_alpha_beta=d,
        model_gap=model_gap_bound(cfg.gamma, K, eps_M),
        V_env=v_env, V_alpha_model=v_alpha_model, eps_k=eps_k, eta=eta,
    )


# =============================================================================
# Verification suite
# =============================================================================

@dataclass
class CheckResult:
    name: str
    max_violation: float
    tolerance: float
    checked: int

    @property
    def passed(self):
        return self.max_violation <= self.tolerance


class _Tracker:
    def __init__(self, tol):
        self.tol = tol
        self.results = {}

    def add(self, name, violation, tol=None):
        r = self.results.setdefault(name, CheckResult(name, 0.0, self.tol if tol is None else tol, 0))
        r.checked += 1
        v = float(violation)
        r.max_violation = max(r.max_violation, v if math.isfinite(v) else math.inf)


def _bound_grid_violation(points=5):
    """Largest wrong-direction move of discrepancy_bound along each axis of a points^5 grid."""
    alphas = np.linspace(0.0, 0.6, points)
    betas = np.linspace(0.0, 0.8, points)
    eps_ms = np.linspace(0.0, 2.0, points)
    ks = np.linspace(0.0, 3.0, points)
    rms = np.linspace(0.5, 2.5, points)
    grid = np.empty((points,) * 5)
    for ia, a in enumerate(alphas):
        for ib, b in enumerate(betas):
            cfg_rows = [DropoutConfig(a, b, 0.9, rm) for rm in rms]
            for ie, e in enumerate(eps_ms):
                for ik, k in enumerate(ks):
                    grid[ia, ib, ie, ik, :] = [discrepancy_bound(c, e, k) for c in cfg_rows]
    worst = 0.0
    for axis in range(5):
        step = np.diff(grid, axis=axis)
        worst = max(worst, float(np.max(step)) if axis == 1 else float(np.max(-step)))
    return max(worst, 0.0)


def _coherence_violation(rng):
    n = int(rng.integers(1, 8))
    dist = ReturnDistribution.from_samples(rng.normal(size=n), rng.dirichlet(np.ones(n)))
    p = float(rng.uniform(0.05, 0.95))
    c = float(rng.normal())
    lam = float(rng.uniform(0.1, 3.0))
    base = cvar_p(dist, p)
    return max(
        abs(cvar_p(dist.shift(c), p) - (base + c)),
        abs(cvar_p(dist.scale(lam), p) - lam * base),
    )


def verify_theory(trials=100, tol=1e-9, seed=0, alphas=DEFAULT_ALPHAS, lp_check=True, progress=False):
    """
    Run every identity and bound on `trials` seeded random enumerable MDPs.
    Returns one CheckResult per check.
    """
    alphas = sorted(alphas)
    track = _Tracker(tol)
    for trial in tqdm(range(trials), desc="verify", disable=not progress):
        mdp = random_mdp(make_rng(seed, "verify-mdp", trial))
        pi = random_policy(mdp, make_rng(seed, "verify-policy", trial))
        dist = mdp_enumerate_returns(mdp, pi)
        v = exact_value(mdp, pi)
        track.add("enumeration mean = backward-induction value", abs(dist.mean() - v))
        lp_ok = lp_check and mdp.trajectory_count <= LP_TRAJECTORY_LIMIT
        previous = None
        for a in alphas:
            v_a = exact_v_alpha(mdp, pi, a)
            neg_cvar = -cvar_p(dist.negate(), a, split_boundary=True)
            adv = adversary_sup(mdp, pi, a)
            track.add("dropout value = -CVaR of negated returns", abs(v_a - neg_cvar))
            track.add("dropout value = adversarial supremum", abs(v_a - adv))
            if lp_ok:
                track.add("greedy adversary = LP adversary", abs(adv - adversary_sup_lp(mdp, pi, a)), LP_TOLERANCE)
            cfg = DropoutConfig(a, 0.0, mdp.gamma, mdp.reward_sup)
            track.add("|V_alpha - V| <= eps_alpha", max(0.0, abs(v_a - v) - eps_alpha(cfg)))
            if previous is not None:
                track.add("V_alpha nonincreasing in alpha", max(0.0, v_a - previous))
            previous = v_a
        track.add("CVaR translation / homogeneity", _coherence_violation(make_rng(seed, "coherence", trial)))
    if trials > 0:
        track.add("discrepancy bound monotone on grid", _bound_grid_violation())
    return list(track.results.values())
