"""
MBDP training loop and the experiment harnesses built on it.

Per epoch:
  1. interact with the real env (uniform random actions for the first
     `init_random_steps` steps of the run), filling D_env
  2. n_train times: train the ensemble, compute biases, model-dropout (beta),
     branched rollouts from D_env, rollout-dropout (alpha), fill D_model
  3. policy updates on D_model
  4. evaluate in the real env and write the bounds ledger row

Run directory layout:

    config.json           config snapshot
    metrics.csv           one row per epoch (deterministic for a fixed seed)
    timings.csv           wall-clock seconds per epoch
    ensemble.csv          per-member report rows
    rollouts.csv          rollout batch statistics
    episodes/final.csv    first evaluation episode of the final policy
    checkpoints/          epoch_NNNN/, final/, latest.json
"""

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.agent import PolicyParams, RandomPolicy, evaluate_episodes, load_policy, policy_update, save_policy
from src.config import ensure_valid, load_config, save_config
from src.core import DropoutConfig, ReplayBuffer, derive_seed, make_rng
from src.database import SweepLedger
from src.ensemble import (
    EnsembleState, compute_biases, load_ensemble, model_dropout, report_rows, save_ensemble, train_ensemble,
)
from src.envs import episode_frame, make_env, perturbation_grid
from src.errors import CheckpointError, ConfigError, MBDPError, TrainingAborted
from src.risk import bounds_report, estimate_eps_M, estimate_lipschitz_K
from src.rollout import batch_stats, dropout_return_estimate, generate_rollouts, rollout_dropout

logger = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "run_id", "epoch", "env_steps", "eval_return", "eval_std", "eval_discounted", "eval_flagged",
    "d_env_size", "d_model_size", "ensemble_size", "retained_models",
    "rollout_generated", "rollout_retained", "rollout_truncated", "policy_updates",
    "eps_alpha", "eps_M", "lipschitz_K", "lipschitz_estimated", "D_alpha_beta", "model_gap",
    "V_env", "V_alpha_model", "eps_k", "eta",
]
BOUNDS_COLUMNS = METRICS_COLUMNS[15:]

ROBUSTNESS_SET = (0.8, 1.2)
GRID_COEFFICIENTS = (0.8, 1.0, 1.2)

VARIANTS = ("no_dropout", "alpha_only", "beta_only", "both")

MANIFEST_NAME = "manifest.json"


def run_id_for(cfg):
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class TrainReport:
    """One epoch of a training run."""

    epoch: int
    env_steps: int
    eval_return: float
    eval_std: float
    eval_discounted: float
    eval_flagged: int
    d_env_size: int
    d_model_size: int
    ensemble_size: int
    retained_models: int
    rollout_generated: int
    rollout_retained: int
    rollout_truncated: int
    policy_updates: int
    bounds: object = None  # BoundsReport, None when no model phase ran this epoch
    wall_time: float = 0.0

    def as_row(self, run_id):
        row = {"run_id": run_id}
        for col in METRICS_COLUMNS[1:15]:
            row[col] = getattr(self, col)
        b = self.bounds.as_row() if self.bounds is not None else {}
        for col in BOUNDS_COLUMNS:
            row[col] = b.get(col, math.nan)
        return row


class _CsvSink:
    """Append-only CSV writer; a missing directory turns every write into a no-op."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir) if out_dir is not None else None

    def start(self, name, columns):
        if self.out_dir is None:
            return
        pd.DataFrame(columns=columns).to_csv(self.out_dir / name, index=False)

    def append(self, name, rows, columns):
        if self.out_dir is None or not rows:
            return
        pd.DataFrame(rows, columns=columns).to_csv(self.out_dir / name, mode="a", header=False, index=False)


ENSEMBLE_COLUMNS = ["epoch", "iteration", "member_id", "train_nll", "val_nll", "bias", "retained"]
ROLLOUT_COLUMNS = ["epoch", "iteration", "groups", "pre_size", "post_size", "mean_threshold",
                   "retained_fraction", "truncated"]


def save_checkpoint(run_dir, name, policy, ens, epoch):
    ckpt = Path(run_dir) / "checkpoints" / name
    ckpt.mkdir(parents=True, exist_ok=True)
    save_policy(policy, ckpt / "policy")
    save_ensemble(ens, ckpt / "ensemble")
    with open(Path(run_dir) / "checkpoints" / "latest.json", "w") as f:
        json.dump({"epoch": epoch, "path": f"checkpoints/{name}"}, f, indent=2)


def load_checkpoint(run_dir):
    """(policy, ensemble, cfg) of the latest checkpoint in a run directory."""
    run_dir = Path(run_dir)
    latest = run_dir / "checkpoints" / "latest.json"
    if not latest.exists():
        raise CheckpointError(f"no checkpoint found under {run_dir}")
    with open(latest, "r") as f:
        path = run_dir / json.load(f)["path"]
    cfg = load_config(run_dir / "config.json")
    return load_policy(path / "policy"), load_ensemble(path / "ensemble", seed=cfg.seed), cfg


def _env_for(cfg, seed_name, c_mass=None, c_friction=None):
    return make_env(
        cfg.env.name,
        cfg.env.c_mass if c_mass is None else c_mass,
        cfg.env.c_friction if c_friction is None else c_friction,
        cfg.env.horizon,
        seed=derive_seed(cfg.seed, seed_name),
    )


def _discounted(transitions, gamma):
    return sum(gamma ** t * tr.reward for t, tr in enumerate(transitions))


def train_with_policy(cfg, out_dir=None, workers=1, progress=False, on_epoch=None, dump_buffers=False):
    """
    Run `cfg.schedule.epochs` MBDP epochs; returns (one TrainReport per epoch, trained policy).
    With `out_dir` every artefact is written there; metric rows are flushed
    as each epoch ends. Any failure is re-raised as TrainingAborted(epoch, stage).
    """
    ensure_valid(cfg)
    s, d = cfg.schedule, cfg.dropout
    run_id = run_id_for(cfg)
    sink = _CsvSink(out_dir)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_config(cfg, Path(out_dir) / "config.json")
    sink.start("metrics.csv", METRICS_COLUMNS)
    sink.start("timings.csv", ["epoch", "wall_seconds"])
    sink.start("ensemble.csv", ENSEMBLE_COLUMNS)
    sink.start("rollouts.csv", ROLLOUT_COLUMNS)

    env = _env_for(cfg, "env")
    eval_env = _env_for(cfg, "eval-env")
    dcfg = DropoutConfig(d.alpha, d.beta, d.gamma, env.reward_sup)
    d_env = ReplayBuffer(cfg.buffers.env_capacity)
    d_model = ReplayBuffer(cfg.buffers.model_capacity)
    ens = EnsembleState.create(env.obs_dim, env.action_dim, cfg.ensemble.size, cfg.ensemble.hidden,
                               derive_seed(cfg.seed, "ensemble"))
    a = cfg.agent
    policy = PolicyParams.create(
        env.obs_dim, env.action_dim, env.action_high, a.hidden, derive_seed(cfg.seed, "agent"),
        gamma=d.gamma, entropy_weight=a.entropy_weight, tau=a.tau, actor_lr=a.actor_lr, critic_lr=a.critic_lr,
    )
    explorer = RandomPolicy(env.action_high)
    act_rng = make_rng(cfg.seed, "env-actions")
    episode = 0
    obs = env.reset(seed=derive_seed(cfg.seed, "env-episode", episode))
    env_steps = 0
    reports = []

    for epoch in tqdm(range(1, s.epochs + 1), desc="epochs", disable=not progress):
        started = time.perf_counter()
        stage = "env interaction"
        try:
            for _ in range(s.env_steps_per_epoch):
                actor = explorer if env_steps < s.init_random_steps else policy
                tr = env.step(actor.act(obs, act_rng))
                d_env.push(tr)
                env_steps += 1
                if env.done:
                    episode += 1
                    obs = env.reset(seed=derive_seed(cfg.seed, "env-episode", episode))
                else:
                    obs = tr.next_state

            generated = retained = truncated = 0
            v_alpha_parts = []
            model_ready = len(d_env) >= cfg.ensemble.min_transitions
            if not model_ready:
                logger.warning(f"epoch {epoch}: D_env holds {len(d_env)} < {cfg.ensemble.min_transitions}; "
                               f"model phase skipped")
            model_steps = max(1, s.env_steps_per_epoch * s.model_updates_per_env_step // s.n_train)
            for it in range(s.n_train if model_ready else 0):
                stage = "ensemble training"
                e = cfg.ensemble
                train_ensemble(ens, d_env, model_steps, seed=derive_seed(cfg.seed, "ensemble-train", epoch, it),
                               batch_size=e.batch_size, validation_fraction=e.validation_fraction,
                               min_transitions=e.min_transitions, lr=e.lr, weight_decay=e.weight_decay,
                               workers=workers)
                stage = "model bias"
                compute_biases(ens)
                stage = "model dropout"
                model_dropout(ens, d.beta)
                sink.append("ensemble.csv", [{**r, "iteration": it} for r in report_rows(ens, epoch)],
                            ENSEMBLE_COLUMNS)

                stage = "rollout generation"
                r = cfg.rollout
                batch = generate_rollouts(ens, policy, d_env, min(r.n_starts, len(d_env)), r.k_per_start,
                                          r.horizon, derive_seed(cfg.seed, "rollouts", epoch, it), env,
                                          workers=workers)
                stage = "rollout dropout"
                kept = rollout_dropout(batch, d.alpha, d.min_group_size, d.mode, d.gamma)
                if len(kept):
                    d_model.push_batch(kept.to_transitions())
                    v_alpha_parts.append(dropout_return_estimate(kept, d.gamma))
                generated += len(batch)
                retained += len(kept)
                truncated += batch.truncated
                sink.append("rollouts.csv", [{**batch_stats(batch, kept, epoch), "iteration": it}], ROLLOUT_COLUMNS)

            stage = "policy update"
            n_updates = s.env_steps_per_epoch * s.policy_updates_per_env_step
            if len(d_model) >= a.batch_size:
                policy_update(policy, d_model, n_updates, a.batch_size, derive_seed(cfg.seed, "policy", epoch))
            else:
                logger.warning(f"epoch {epoch}: D_model holds {len(d_model)} < batch size {a.batch_size}; "
                               f"policy update skipped")
                n_updates = 0

            stage = "evaluation"
            episodes = evaluate_episodes(policy, eval_env, s.eval_episodes, derive_seed(cfg.seed, "eval", epoch),
                                         workers=workers)
            returns = np.array([ep[1] for ep in episodes])
            v_env = float(np.mean([_discounted(ep[0], d.gamma) for ep in episodes]))

            stage = "bounds"
            bounds = None
            if model_ready and v_alpha_parts:
                K, estimated = cfg.bounds.lipschitz_k, False
                if K is None:
                    idx = d_env.sample_indices(min(cfg.bounds.lipschitz_states, len(d_env)),
                                               derive_seed(cfg.seed, "lipschitz", epoch))
                    K = estimate_lipschitz_K(policy.state_value, d_env.as_batch(idx).states,
                                             cfg.bounds.lipschitz_pairs, derive_seed(cfg.seed, "pairs", epoch))
                    estimated = True
                bounds = bounds_report(epoch, dcfg, estimate_eps_M(ens), K, v_env,
                                       float(np.mean(v_alpha_parts)), estimated)

            report = TrainReport(
                epoch=epoch, env_steps=env_steps,
                eval_return=float(returns.mean()), eval_std=float(returns.std()), eval_discounted=v_env,
                eval_flagged=int(sum(ep[2] for ep in episodes)),
                d_env_size=len(d_env), d_model_size=len(d_model), ensemble_size=len(ens),
                retained_models=len(ens.retained_ids), rollout_generated=generated, rollout_retained=retained,
                rollout_truncated=truncated, policy_updates=n_updates, bounds=bounds,
                wall_time=time.perf_counter() - started,
            )
            reports.append(report)
            sink.append("metrics.csv", [report.as_row(run_id)], METRICS_COLUMNS)
            sink.append("timings.csv", [{"epoch": epoch, "wall_seconds": report.wall_time}],
                        ["epoch", "wall_seconds"])

            stage = "checkpoint"
            if out_dir is not None and s.checkpoint_every and epoch % s.checkpoint_every == 0:
                save_checkpoint(out_dir, f"epoch_{epoch:04d}", policy, ens, epoch)
            if on_epoch is not None:
                on_epoch(report)
        except TrainingAborted:
            raise
        except Exception as e:
            raise TrainingAborted(epoch, stage, e) from e

    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(out, "final", policy, ens, s.epochs)
        if s.epochs > 0:
            (out / "episodes").mkdir(exist_ok=True)
            first = evaluate_episodes(policy, eval_env, 1, derive_seed(cfg.seed, "final-episode"))[0][0]
            episode_frame(first).to_csv(out / "episodes" / "final.csv", index=False)
        if dump_buffers:
            (out / "buffers").mkdir(exist_ok=True)
            d_env.dump_csv(out / "buffers" / "d_env.csv")
            d_model.dump_csv(out / "buffers" / "d_model.csv")
    return reports, policy


def mbdp_train(cfg, out_dir=None, workers=1, progress=False, on_epoch=None, dump_buffers=False):
    """Algorithm driver: one TrainReport per epoch (see train_with_policy)."""
    return train_with_policy(cfg, out_dir, workers, progress, on_epoch, dump_buffers)[0]


# =============================================================================
# Robustness grid
# =============================================================================

def robustness_grid(cfg, masses=GRID_COEFFICIENTS, frictions=GRID_COEFFICIENTS, policy=None, run_dir=None,
                    n_episodes=None, seed=None, workers=1):
    """
    Mean evaluation return of one policy on every (c_mass, c_friction) cell.
    Rows are c_mass, columns c_friction.
    """
    if policy is None:
        if run_dir is None:
            raise CheckpointError("robustness grid needs a policy or a run directory")
        policy = load_checkpoint(run_dir)[0]
    n_episodes = n_episodes or cfg.schedule.eval_episodes
    seed = cfg.seed if seed is None else seed
    matrix = pd.DataFrame(index=pd.Index(list(masses), name="c_mass"), columns=list(frictions), dtype=float)
    for p in perturbation_grid(masses, frictions):
        env = _env_for(cfg, "eval-env", p.c_mass, p.c_friction)
        episodes = evaluate_episodes(policy, env, n_episodes, derive_seed(seed, "grid-eval"), workers=workers)
        matrix.loc[p.c_mass, p.c_friction] = float(np.mean([ep[1] for ep in episodes]))
    return matrix


def write_matrix(matrix, path, run_id="", manifest=MANIFEST_NAME):
    """Matrix CSV led by one `#` line naming the run id and its manifest."""
    with open(path, "w") as f:
        f.write(f"# run_id={run_id} manifest={manifest}\n")
        matrix.to_csv(f, index=True)


def read_matrix(path):
    matrix = pd.read_csv(path, index_col=0, comment="#")
    matrix.columns = matrix.columns.astype(float)
    return matrix


def variant_config(cfg, variant):
    """The four robustness-comparison variants around the configured alpha / beta."""
    alpha, beta = cfg.dropout.alpha, cfg.dropout.beta
    pairs = {"no_dropout": (0.0, 0.0), "alpha_only": (alpha, 0.0), "beta_only": (0.0, beta), "both": (alpha, beta)}
    if variant not in pairs:
        raise ConfigError(f"variant {variant!r}: expected one of {list(pairs)}")
    out = cfg.copy()
    out.dropout.alpha, out.dropout.beta = pairs[variant]
    return out


def variant_grids(cfg, out_dir, masses=GRID_COEFFICIENTS, frictions=GRID_COEFFICIENTS, workers=1,
                  progress=False, on_epoch=None):
    """Train each variant into out_dir/<variant> and write out_dir/grid_<variant>.csv."""
    out_dir = Path(out_dir)
    grids = {}
    for variant in VARIANTS:
        vcfg = variant_config(cfg, variant)
        _, policy = train_with_policy(vcfg, out_dir / variant, workers, progress, on_epoch)
        grids[variant] = robustness_grid(vcfg, masses, frictions, policy=policy, workers=workers)
        write_matrix(grids[variant], out_dir / f"grid_{variant}.csv", run_id_for(vcfg), out_dir / MANIFEST_NAME)
    return grids


# =============================================================================
# Ablation sweep
# =============================================================================

SWEEP_COLUMNS = ["run_id", "arm", "alpha", "beta", "seed", "status", "efficiency", "robustness", "error"]


def sweep_cells(cfg, alphas, betas, seeds, include_baseline=True):
    """(arm, alpha, beta, seed) cells: alpha arm at fixed beta, beta arm at fixed alpha, optional baseline."""
    if not alphas or not betas or not seeds:
        raise ConfigError("sweep needs nonempty alphas, betas and seeds")
    pairs = []
    seen = set()
    candidates = [("alpha", float(a), cfg.dropout.beta) for a in alphas]
    candidates += [("beta", cfg.dropout.alpha, float(b)) for b in betas]
    if include_baseline:
        candidates.append(("baseline", 0.0, 0.0))
    for arm, a, b in candidates:
        if (a, b) not in seen:
            seen.add((a, b))
            pairs.append((arm, a, b))
    return [(arm, a, b, int(seed)) for arm, a, b in pairs for seed in seeds]


def cell_key(alpha, beta, seed):
    return f"a{alpha:g}_b{beta:g}_s{seed}"


def cell_config(cfg, alpha, beta, seed):
    ccfg = cfg.copy()
    ccfg.dropout.alpha, ccfg.dropout.beta, ccfg.seed = alpha, beta, seed
    return ccfg


def run_cell(cfg, alpha, beta, seed, out_dir=None, workers=1):
    """(efficiency, robustness) of one trained cell."""
    ccfg = cell_config(cfg, alpha, beta, seed)
    reports, policy = train_with_policy(ccfg, out_dir, workers)
    efficiency = reports[-1].eval_return if reports else math.nan
    grid = robustness_grid(ccfg, ROBUSTNESS_SET, ROBUSTNESS_SET, policy=policy, workers=workers)
    return efficiency, float(grid.to_numpy().mean())


def ablation_sweep(cfg, alphas, betas, seeds, out_dir=None, include_baseline=True, workers=1, progress=False):
    """
    Train every sweep cell and tabulate efficiency (final unperturbed return)
    and robustness (mean return over the perturbed set). With `out_dir` the
    cells are tracked in out_dir/sweep.db and completed cells are skipped on
    rerun. Failed cells are recorded and the sweep continues.
    """
    cells = sweep_cells(cfg, alphas, betas, seeds, include_baseline)
    ledger = SweepLedger(Path(out_dir) / "sweep.db") if out_dir is not None else None
    rows = []
    for arm, alpha, beta, seed in tqdm(cells, desc="sweep", disable=not progress):
        key = cell_key(alpha, beta, seed)
        run_id = run_id_for(cell_config(cfg, alpha, beta, seed))
        done = ledger.get(key) if ledger else None
        if done is not None and done.status == "completed":
            rows.append({"run_id": run_id, "arm": arm, "alpha": alpha, "beta": beta, "seed": seed,
                         "status": "completed", "efficiency": done.efficiency, "robustness": done.robustness,
                         "error": ""})
            continue
        cell_dir = Path(out_dir) / "cells" / key if out_dir is not None else None
        try:
            eff, rob = run_cell(cfg, alpha, beta, seed, cell_dir, workers)
            row = {"status": "completed", "efficiency": eff, "robustness": rob, "error": ""}
        except Exception as e:
            logger.warning(f"sweep cell {key} failed: {type(e).__name__}: {e}")
            row = {"status": "failed", "efficiency": math.nan, "robustness": math.nan,
                   "error": f"{type(e).__name__}: {e}"}
        row.update({"run_id": run_id, "arm": arm, "alpha": alpha, "beta": beta, "seed": seed})
        rows.append(row)
        if ledger:
            ledger.record(key, row, run_dir=str(cell_dir) if cell_dir else None)
    table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    if out_dir is not None:
        table.to_csv(Path(out_dir) / "sweep.csv", index=False)
    return table


# =============================================================================
# Residual trace
# =============================================================================

def residual_trace(metrics):
    """
    (trace, summary) from a metrics table: eta scaled by max |eta| per epoch,
    and the fraction of epochs (overall / first half) with eta > 0.
    """
    if metrics is None or len(metrics) == 0:
        raise MBDPError("run has no metrics rows")
    rows = metrics.dropna(subset=["eta"])
    if len(rows) == 0:
        raise MBDPError("run has no epochs with a bounds report")
    eta = rows["eta"].to_numpy(dtype=float)
    peak = np.max(np.abs(eta))
    scaled = eta / peak if peak > 0 else np.zeros_like(eta)
    run_id = rows["run_id"].to_numpy() if "run_id" in rows.columns else [""] * len(rows)
    trace = pd.DataFrame({"run_id": run_id, "epoch": rows["epoch"].to_numpy(),
                          "eps_k": rows["eps_k"].to_numpy(), "eta": eta, "eta_scaled": scaled})
    half = max(1, len(eta) // 2)
    summary = {
        "epochs": len(eta),
        "positive_fraction": float(np.mean(eta > 0)),
        "early_positive_fraction": float(np.mean(eta[:half] > 0)),
    }
    if summary["early_positive_fraction"] <= 0.5:
        logger.warning(f"eta > 0 in only {summary['early_positive_fraction']:.0%} of the first {half} epochs")
    return trace, summary
