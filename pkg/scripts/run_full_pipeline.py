#!/usr/bin/env python3
"""
Master Pipeline Script - Runs the Full Experiment in Sequence

This script orchestrates the whole MBDP experiment:
- Phase 1: verify           - brute-force identity / bound checks on random finite MDPs
- Phase 2: robustness-grid  - trains the four dropout variants and grids each one
- Phase 3: residual-trace   - eta trace of the alpha + beta variant
- Phase 4: learning check   - final return of each variant against the random-policy band

Every phase is recorded in <out>/pipeline_manifest.json; rerunning skips
phases already marked completed.

Usage:
    python3 scripts/run_full_pipeline.py [--config configs/pendulum.json] [--out runs/pipeline] [--fresh]
"""

import argparse
import json
import shutil
import subprocess
import sys
from datetime import datetime
from pathlib import Path

import pandas as pd

PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from src.agent import random_policy_baseline  # noqa: E402
from src.config import load_config  # noqa: E402
from src.core import derive_seed  # noqa: E402
from src.envs import make_env  # noqa: E402
from src.errors import EXIT_INTERRUPTED  # noqa: E402
from src.trainer import VARIANTS  # noqa: E402

RUN_SCRIPT = PROJECT_ROOT / "run.py"
DEFAULT_CONFIG = PROJECT_ROOT / "configs" / "pendulum.json"
MANIFEST_NAME = "pipeline_manifest.json"
BASELINE_MARGIN = 3.0  # required gap, in random-policy standard deviations


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


def load_manifest(out_dir):
    path = out_dir / MANIFEST_NAME
    if path.exists():
        with open(path, "r") as f:
            return json.load(f)
    return {"phases": {}}


def save_manifest(out_dir, manifest):
    manifest["last_updated"] = datetime.now().isoformat()
    with open(out_dir / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2)


def run_phase(args, phase_name, phase_number):
    """Run one CLI subcommand and handle errors."""
    print_section(f"PHASE {phase_number}: {phase_name}")

    try:
        result = subprocess.run(
            [sys.executable, str(RUN_SCRIPT), *args],
            cwd=PROJECT_ROOT,
            check=True,
            capture_output=False  # Show output in real-time
        )
        print(f"\n  ✅ Phase {phase_number} completed successfully")
        return result.returncode == 0

    except subprocess.CalledProcessError as e:
        print(f"\n  ❌ Phase {phase_number} failed with exit code {e.returncode}")
        return False
    except KeyboardInterrupt:
        print(f"\n\n  ⚠️  Phase {phase_number} interrupted by user")
        raise


def learning_check(config_path, grid_dir):
    """Final unperturbed return of each variant versus the seeded random-policy band."""
    print_section("PHASE 4: LEARNING CHECK")

    cfg = load_config(config_path)
    env = make_env(cfg.env.name, horizon=cfg.env.horizon)
    base_mean, base_std = random_policy_baseline(env, cfg.schedule.eval_episodes,
                                                 derive_seed(cfg.seed, "random-baseline"))
    threshold = base_mean + BASELINE_MARGIN * base_std
    print(f"  📊 Random policy: {base_mean:.2f} ± {base_std:.2f} (threshold {threshold:.2f})")

    results = {}
    for variant in VARIANTS:
        metrics_path = grid_dir / variant / "metrics.csv"
        if not metrics_path.exists():
            print(f"  ⚠️  {variant}: no metrics.csv")
            continue
        metrics = pd.read_csv(metrics_path)
        if metrics.empty:
            print(f"  ⚠️  {variant}: no epochs recorded")
            continue
        final = float(metrics["eval_return"].iloc[-1])
        ok = final >= threshold
        results[variant] = {"final_return": final, "beats_baseline": ok}
        print(f"  {'✅' if ok else '⚠️ '} {variant:<12} final return {final:8.2f}")

    return {"baseline_mean": base_mean, "baseline_std": base_std, "variants": results}


def main():
    """Main pipeline orchestrator."""
    parser = argparse.ArgumentParser(
        description="Run the complete MBDP experiment (verify, variants + grids, residual trace, learning check)",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Run full pipeline (resumes from existing progress)
  python3 scripts/run_full_pipeline.py

  # Different environment, fresh output directory
  python3 scripts/run_full_pipeline.py --config configs/cartpole.json --out runs/cartpole --fresh

  # Faster theory check
  python3 scripts/run_full_pipeline.py --trials 20
        """
    )

    parser.add_argument('--config', default=str(DEFAULT_CONFIG), help='Run configuration (JSON)')
    parser.add_argument('--out', default=str(PROJECT_ROOT / "runs" / "pipeline"), help='Pipeline output directory')
    parser.add_argument('--trials', type=int, default=100, help='Random MDPs for the verify phase')
    parser.add_argument('--workers', type=int, default=1, help='Parallel workers passed to every phase')
    parser.add_argument(
        '--fresh',
        action='store_true',
        help='Delete the output directory before running (fresh start)'
    )

    args = parser.parse_args()
    out_dir = Path(args.out)
    grid_dir = out_dir / "grid"

    print_header("MBDP - FULL PIPELINE")
    print(f"Starting at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")

    if args.fresh and out_dir.exists():
        print(f"\n⚠️  FRESH START MODE: {out_dir} will be deleted")
        response = input("Continue? (yes/no): ")
        if response.lower() not in ['yes', 'y']:
            print("Aborted.")
            return
        shutil.rmtree(out_dir)

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(out_dir)
    manifest.setdefault("created", datetime.now().isoformat())
    manifest["config"] = args.config
    workers = ["--workers", str(args.workers)]

    phases = [
        (1, "THEORY VERIFICATION", ["verify", "--trials", str(args.trials), "--out", str(out_dir / "verify"),
                                    "--overwrite", *workers]),
        (2, "FOUR-VARIANT ROBUSTNESS GRIDS", ["robustness-grid", "--variants", "--config", args.config,
                                              "--out", str(grid_dir), "--overwrite", "--quiet", *workers]),
        (3, "RESIDUAL TRACE", ["residual-trace", "--run", str(grid_dir / "both"), "--overwrite"]),
    ]
    for number, name, cli_args in phases:
        key = f"phase_{number}"
        if manifest["phases"].get(key, {}).get("status") == "completed":
            print(f"  ⏭️  Phase {number} already completed, skipping")
            continue
        ok = run_phase(cli_args, name, number)
        manifest["phases"][key] = {"name": name, "status": "completed" if ok else "failed",
                                   "finished": datetime.now().isoformat()}
        save_manifest(out_dir, manifest)
        # a failed verify is reported but does not block the training phases
        if not ok and number > 1:
            print(f"\n❌ Pipeline stopped: Phase {number} failed")
            return

    manifest["learning_check"] = learning_check(args.config, grid_dir)
    save_manifest(out_dir, manifest)

    # Final summary
    print_header("PIPELINE COMPLETE")
    for key, phase in sorted(manifest["phases"].items()):
        glyph = "✅" if phase["status"] == "completed" else "❌"
        print(f"  {glyph} {phase['name']}")
    print(f"\n  📁 Grids: {grid_dir}")
    print(f"  📁 Manifest: {out_dir / MANIFEST_NAME}")

    print(f"\nCompleted at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print("=" * 80)


if __name__ == "__main__":
    try:
        main()
    except KeyboardInterrupt:
        print("\n\n⚠️  Pipeline interrupted by user")
        print("Progress has been saved. You can resume by running the script again.")
        sys.exit(EXIT_INTERRUPTED)
