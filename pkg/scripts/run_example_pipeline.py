#!/usr/bin/env python3
"""
Example Pipeline Script for dynrisk
Runs synth -> encode -> stats -> loo-rf -> select -> fit-cox -> compare on the bundled example inputs.
"""

import argparse
import logging
import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.append(str(Path(__file__).parent.parent))

from dynrisk.cli import main as dynrisk_main

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent.parent / "data"


def run_step(name: str, argv: list) -> bool:
    """
    Run one dynrisk command.

    Args:
        name: Step name for logging
        argv: Command-line arguments

    Returns:
        True if the command succeeded
    """
    logger.info(f"Running step: {name}")
    code = dynrisk_main(argv)
    if code != 0:
        logger.error(f"❌ {name} - FAILED (exit {code})")
        return False
    return True


def main() -> int:
    """Run the whole example pipeline under one output directory."""
    parser = argparse.ArgumentParser(description="Run the dynrisk example pipeline")
    parser.add_argument("--out", default="runs/example", help="Root output directory")
    parser.add_argument("--seed", type=int, default=2021)
    parser.add_argument("--threads", type=int, default=4)
    args = parser.parse_args()

    out = Path(args.out)
    common = ["--seed", str(args.seed), "--threads", str(args.threads)]
    run_config = ["--config", str(DATA_DIR / "example_run_config.json")]
    synth_dir = out / "synth"
    subjects = ["--subjects", str(synth_dir / "subjects.jsonl")]

    steps = [
        ("synth", ["synth", "--generator", str(DATA_DIR / "example_generator.json"), "--out", str(synth_dir)] + common),
        ("encode", ["encode", *subjects, "--catalog", str(synth_dir / "catalog.csv"), "--out", str(out / "encode")]
         + common),
        ("stats", ["stats", *subjects, "--catalog", str(synth_dir / "catalog.csv"), "--out", str(out / "stats")]
         + common),
        ("loo-rf", ["loo-rf", "--cohort", str(out / "encode" / "encoded.csv"), "--final-model",
                    "--out", str(out / "loo_rf")] + run_config + common),
        ("loo-rf without age", ["loo-rf", "--cohort", str(out / "encode" / "encoded.csv"), "--exclude-features", "age",
                                "--out", str(out / "loo_rf_no_age")] + run_config + common),
        ("select", ["select", "--ranking", str(out / "loo_rf" / "ranking.csv"),
                    "--review", str(DATA_DIR / "example_review.json"), "--catalog", str(synth_dir / "catalog.csv"),
                    "--out", str(out / "select")] + common),
        ("encode shortlist", ["encode", *subjects, "--catalog", str(out / "select" / "catalog.csv"),
                              "--out", str(out / "encode_shortlist")] + common),
        ("fit-cox", ["fit-cox", "--cohort", str(out / "encode_shortlist" / "encoded.csv"),
                     "--shortlist", str(out / "select" / "shortlist.csv"), "--out", str(out / "fit_cox")] + common),
        ("loo-cox", ["loo-cox", "--cohort", str(out / "encode_shortlist" / "encoded.csv"),
                     "--out", str(out / "loo_cox")] + common),
        ("compare", ["compare", *subjects, "--catalog", str(synth_dir / "catalog.csv"),
                     "--equation", str(DATA_DIR / "example_equation.json"), "--out", str(out / "compare")] + common),
    ]

    for name, argv in steps:
        if not run_step(name, argv):
            return 1

    # Console-only logging for the summary
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s", force=True)
    logger.info("\n" + "=" * 50)
    logger.info("🎯 Pipeline Summary:")
    for name, argv in steps:
        logger.info(f"✅ {name}: {argv[argv.index('--out') + 1]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
