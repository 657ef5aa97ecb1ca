"""
Command-line entry point.

Subcommands:
- train            run MBDP and write metrics, reports and checkpoints
- verify           brute-force identity / bound checks on random finite MDPs
- robustness-grid  evaluate a trained policy over mass / friction perturbations
- sweep            alpha / beta ablation sweep (resumable)
- residual-trace   scaled eta = eps_k - eps_alpha per epoch from a run's metrics

Precedence for configuration values: explicit flags > --set > --preset > file > defaults.
"""

import argparse
import json
import logging
import shutil
import sys
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd

from src import __version__
from src import risk
from src.config import Config, apply_overrides, apply_preset, default_output_root, ensure_valid, load_config, PRESETS
from src.errors import (
    EXIT_CONFIG, EXIT_INTERRUPTED, EXIT_OK, EXIT_VERIFY_FAILED, ConfigError, MBDPError, OutputDirError, exit_code_for,
)
from src.trainer import (
    GRID_COEFFICIENTS, MANIFEST_NAME, ablation_sweep, load_checkpoint, residual_trace, robustness_grid, run_id_for,
    train_with_policy, variant_grids, write_matrix,
)

logger = logging.getLogger(__name__)


def print_header(text):
    """Print a formatted header."""
    print("\n" + "=" * 80)
    print(f"  {text}")
    print("=" * 80 + "\n")


def print_section(text):
    """Print a section divider."""
    print("\n" + "-" * 80)
    print(f"  {text}")
    print("-" * 80 + "\n")


# =============================================================================
# Output directory + manifest
# =============================================================================

def prepare_output_dir(path, overwrite):
    """Create `path`; an existing non-empty directory is only replaced with --overwrite."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise OutputDirError(f"output directory {path} is not empty (use --overwrite to replace it)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out_dir, command, cfg, argv, status="running"):
    """Create or update the run manifest; created is kept, last_updated refreshed."""
    path = Path(out_dir) / MANIFEST_NAME
    manifest = {}
    if path.exists():
        with open(path, "r") as f:
            manifest = json.load(f)
    now = datetime.now().isoformat()
    manifest.setdefault("created", now)
    manifest.update({
        "last_updated": now,
        "command": command,
        "argv": list(argv),
        "code_version": __version__,
        "output_dir": str(out_dir),
        "status": status,
    })
    if cfg is not None:
        manifest.update({"seed": cfg.seed, "run_id": run_id_for(cfg), "config": cfg.to_dict()})
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def _parse_set(items):
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def build_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    if getattr(args, "preset", None):
        cfg = apply_preset(cfg, args.preset)
    cfg = apply_overrides(cfg, _parse_set(getattr(args, "set", None)))
    flags = {
        "seed": args.seed,
        "env.name": getattr(args, "env", None),
        "schedule.epochs": getattr(args, "epochs", None),
        "dropout.alpha": getattr(args, "alpha", None),
        "dropout.beta": getattr(args, "beta", None),
        "dropout.gamma": getattr(args, "gamma", None),
    }
    cfg = apply_overrides(cfg, {k: v for k, v in flags.items() if v is not None})
    return ensure_valid(cfg)


def _out_dir(args, default_name):
    return Path(args.out) if args.out else default_output_root() / default_name


def _fmt(v, fmt="+.3f"):
    return "nan" if v is None or not np.isfinite(v) else format(v, fmt)


# =============================================================================
# Commands
# =============================================================================

def cmd_train(args, argv):
    cfg = build_config(args)
    out = prepare_output_dir(_out_dir(args, f"train_{run_id_for(cfg)}"), args.overwrite)
    write_manifest(out, "train", cfg, argv)
    if not args.quiet:
        print_header(f"MBDP TRAINING - {cfg.env.name}")
        print(f"  alpha={cfg.dropout.alpha}  beta={cfg.dropout.beta}  gamma={cfg.dropout.gamma}  "
              f"epochs={cfg.schedule.epochs}  seed={cfg.seed}")
        print(f"  📁 Output: {out}")
        print_section("EPOCHS")

    def on_epoch(r):
        if args.quiet:
            return
        eta = r.bounds.eta if r.bounds is not None else None
        print(f"  epoch {r.epoch:>4}  steps {r.env_steps:>7}  return {r.eval_return:9.3f} ± {r.eval_std:7.3f}  "
              f"D_model {r.d_model_size:>6}  models {r.retained_models}/{r.ensemble_size}  eta {_fmt(eta)}")

    try:
        reports, _ = train_with_policy(cfg, out, args.workers, progress=False, on_epoch=on_epoch,
                                       dump_buffers=args.dump_buffers)
    except MBDPError:
        write_manifest(out, "train", cfg, argv, status="failed")
        raise
    write_manifest(out, "train", cfg, argv, status="completed")
    if not args.quiet:
        print_header("TRAINING COMPLETE")
        if reports:
            print(f"  📊 Final return: {reports[-1].eval_return:.3f} ± {reports[-1].eval_std:.3f}")
        print(f"  📊 Epochs: {len(reports)}")
        print(f"  📁 Metrics: {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_verify(args, argv):
    if not args.quiet:
        print_header("THEORY VERIFICATION")
    if args.trials == 0:
        print("  ⚠️  trials=0: nothing was checked (vacuous pass)")
        return EXIT_OK
    results = risk.verify_theory(args.trials, args.tolerance, args.seed, tuple(args.alphas),
                                 lp_check=not args.no_lp, progress=not args.quiet)
    rows = []
    for r in results:
        glyph = "✅" if r.passed else "❌"
        print(f"  {glyph} {r.name:<48} max violation {r.max_violation:.3e}  (tol {r.tolerance:.0e}, n={r.checked})")
        rows.append({"check": r.name, "max_violation": r.max_violation, "tolerance": r.tolerance,
                     "checked": r.checked, "passed": r.passed})
    if args.out:
        out = prepare_output_dir(args.out, args.overwrite)
        write_manifest(out, "verify", None, argv, status="completed")
        pd.DataFrame(rows).to_csv(out / "verify.csv", index=False)
    failed = [r for r in results if not r.passed]
    print(f"\n  {'❌ ' + str(len(failed)) + ' check(s) failed' if failed else '✅ all checks passed'}")
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


def _grid_axes(args):
    if args.resolution:
        lo, hi = args.range
        axis = [round(float(v), 6) for v in np.linspace(lo, hi, args.resolution)]
        return axis, axis
    return args.masses, args.frictions


def cmd_robustness_grid(args, argv):
    masses, frictions = _grid_axes(args)
    if args.variants:
        cfg = build_config(args)
        out = prepare_output_dir(_out_dir(args, f"grid_{run_id_for(cfg)}"), args.overwrite)
        write_manifest(out, "robustness-grid", cfg, argv)
        if not args.quiet:
            print_header("ROBUSTNESS GRID - FOUR VARIANTS")
        grids = variant_grids(cfg, out, masses, frictions, args.workers)
        write_manifest(out, "robustness-grid", cfg, argv, status="completed")
        for name, matrix in grids.items():
            if not args.quiet:
                print_section(name)
                print(matrix.round(3).to_string())
        return EXIT_OK

    if not args.run:
        raise ConfigError("robustness-grid needs --run DIR or --variants")
    policy, _, cfg = load_checkpoint(args.run)
    matrix = robustness_grid(cfg, masses, frictions, policy=policy, n_episodes=args.episodes, workers=args.workers)
    target = Path(args.out) / "grid.csv" if args.out else Path(args.run) / "grid.csv"
    if target.exists() and not args.overwrite:
        raise OutputDirError(f"{target} exists (use --overwrite to replace it)")
    target.parent.mkdir(parents=True, exist_ok=True)
    write_matrix(matrix, target, run_id_for(cfg), Path(args.run) / MANIFEST_NAME)
    if not args.quiet:
        print_header("ROBUSTNESS GRID")
        print(matrix.round(3).to_string())
        print(f"\n  📁 Saved: {target}")
    return EXIT_OK


def cmd_sweep(args, argv):
    cfg = build_config(args)
    out = Path(args.out) if args.out else default_output_root() / f"sweep_{run_id_for(cfg)}"
    if out.exists() and any(out.iterdir()) and not args.resume:
        prepare_output_dir(out, args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "sweep", cfg, argv)
    if not args.quiet:
        print_header("ABLATION SWEEP")
    table = ablation_sweep(cfg, args.alphas, args.betas, args.seeds, out, include_baseline=not args.no_baseline,
                           workers=args.workers, progress=not args.quiet)
    write_manifest(out, "sweep", cfg, argv, status="completed")
    if not args.quiet:
        print(table.to_string(index=False))
        completed = int((table["status"] == "completed").sum())
        print(f"\n  ✅ Completed: {completed}")
        print(f"  ❌ Failed: {len(table) - completed}")
        print(f"  📁 Table: {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_residual_trace(args, argv):
    run = Path(args.run)
    metrics_path = run / "metrics.csv"
    if not metrics_path.exists():
        raise MBDPError(f"no metrics.csv under {run}")
    trace, summary = residual_trace(pd.read_csv(metrics_path))
    target = Path(args.out) / "residual_trace.csv" if args.out else run / "residual_trace.csv"
    if target.exists() and not args.overwrite:
        raise OutputDirError(f"{target} exists (use --overwrite to replace it)")
    target.parent.mkdir(parents=True, exist_ok=True)
    trace.to_csv(target, index=False)
    print_header("RESIDUAL TRACE")
    print(f"  📊 Epochs with a bounds report: {summary['epochs']}")
    print(f"  📊 eta > 0 overall: {summary['positive_fraction']:.0%}")
    early = summary["early_positive_fraction"]
    glyph = "✅" if early > 0.5 else "⚠️ "
    print(f"  {glyph} eta > 0 in the first half: {early:.0%}")
    print(f"  📁 Saved: {target}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "verify": cmd_verify,
    "robustness-grid": cmd_robustness_grid,
    "sweep": cmd_sweep,
    "residual-trace": cmd_residual_trace,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Root seed (overrides the config file)")
    common.add_argument("--workers", type=int, default=1, help="Parallel workers; 1 is bit-exact reproducible")
    common.add_argument("--out", default=None, help="Output directory (default: $MBDP_OUTPUT_ROOT/<command>_<run id>)")
    common.add_argument("--overwrite", action="store_true", help="Replace an existing non-empty output directory")
    common.add_argument("--quiet", action="store_true", help="Only print errors and final summaries")

    cfg_args = argparse.ArgumentParser(add_help=False)
    cfg_args.add_argument("--config", default=None, help="JSON run configuration")
    cfg_args.add_argument("--preset", choices=sorted(PRESETS), default=None, help="alpha/beta preset")
    cfg_args.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override any config key, e.g. rollout.horizon=5")
    cfg_args.add_argument("--env", default=None, help="Environment name")
    cfg_args.add_argument("--epochs", type=int, default=None)
    cfg_args.add_argument("--alpha", type=float, default=None, help="Rollout-dropout ratio, 0 <= alpha < 1")
    cfg_args.add_argument("--beta", type=float, default=None, help="Model-dropout ratio, 0 <= beta < 1")
    cfg_args.add_argument("--gamma", type=float, default=None)

    parser = argparse.ArgumentParser(
        prog="mbdp",
        description="Model-based RL with rollout-dropout and model-dropout",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Train on the pendulum with the default ratios
  python3 run.py train --config configs/pendulum.json --alpha 0.2 --beta 0.2

  # Check every identity and bound on 100 random finite MDPs
  python3 run.py verify --trials 100

  # Four-variant robustness comparison on a 3x3 grid
  python3 run.py robustness-grid --variants --config configs/pendulum.json

  # Alpha sweep at beta=0.2 over three seeds, with the no-dropout baseline
  python3 run.py sweep --config configs/pendulum.json --alphas 0 0.2 0.4 --betas 0.2 --seeds 0 1 2
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common, cfg_args], help="Run MBDP training")
    p.add_argument("--dump-buffers", action="store_true", help="Write D_env and D_model as CSV at the end")

    p = sub.add_parser("verify", parents=[common], help="Run the brute-force theory checks")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--alphas", type=float, nargs="+", default=list(risk.DEFAULT_ALPHAS))
    p.add_argument("--no-lp", action="store_true", help="Skip the linear-programming cross-check")

    p = sub.add_parser("robustness-grid", parents=[common, cfg_args], help="Evaluate over perturbed envs")
    p.add_argument("--run", default=None, help="Trained run directory")
    p.add_argument("--variants", action="store_true", help="Train and grid the four dropout variants")
    p.add_argument("--masses", type=float, nargs="+", default=list(GRID_COEFFICIENTS))
    p.add_argument("--frictions", type=float, nargs="+", default=list(GRID_COEFFICIENTS))
    p.add_argument("--resolution", type=int, default=None, help="Cells per axis (overrides --masses/--frictions)")
    p.add_argument("--range", type=float, nargs=2, default=[0.8, 1.2], metavar=("LO", "HI"))
    p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("sweep", parents=[common, cfg_args], help="Alpha / beta ablation sweep")
    p.add_argument("--alphas", type=float, nargs="+", required=True)
    p.add_argument("--betas", type=float, nargs="+", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--no-baseline", action="store_true", help="Skip the alpha=beta=0 reference cell")
    p.add_argument("--resume", action="store_true", help="Continue a sweep in an existing output directory")

    p = sub.add_parser("residual-trace", parents=[common], help="Scaled residual trace of a run")
    p.add_argument("--run", required=True, help="Run directory containing metrics.csv")
    return parser


def configure_logging(quiet):
    logging.basicConfig(
        level=logging.ERROR if quiet else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    configure_logging(args.quiet)
    if args.command == "verify" and args.seed is None:
        args.seed = 0
    try:
        return COMMANDS[args.command](args, argv)
    except ConfigError as e:
        print("❌ Invalid configuration:", file=sys.stderr)
        for problem in e.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except MBDPError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code_for(e)
    except KeyboardInterrupt:
        print("\n\n⚠️  Interrupted by user")
        return EXIT_INTERRUPTED
