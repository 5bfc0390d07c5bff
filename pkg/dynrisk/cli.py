#!/usr/bin/env python3
"""
dynrisk command line
Runs each pipeline step into its own output directory with a reproducibility manifest.
"""

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .cohort_model import (
    EncodedCohort,
    FeatureCatalog,
    columns_sidecar,
    descriptive_stats,
    encode_cohort,
    read_subjects,
)
from .config import configure_logging, load_config
from .cox_ph import CoxOptions, cox_risk_scores, fit_cox, hazard_ratio_report
from .evaluation import CoxTrainer, RandomForestTrainer, balance_all, f_beta_curve, roc_curve, run_loo
from .exceptions import ConfigurationError, DynriskError
from .external_model import compare_external, load_equation
from .feature_selection import RankedFeatureList, ReviewConfig, apply_review, rebuild_catalog
from .random_forest import ForestParams, predict_with_ci, train_forest
from .seeding import derive_seed
from .synth_cohort import GeneratorConfig, generate_cohort, write_cohort

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
LOG_NAME = "run.log"
AUDIT_NAME = "audit.log"
CSV_OPTIONS = {"index": False, "lineterminator": "\n", "float_format": "%.17g"}


def file_digest(path: Path) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def audit_digest(path: Path) -> str:
    """Digest of an audit log with the trailing timestamp field of every line left out."""
    sha = hashlib.sha256()
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            sha.update((line.rstrip("\n").rpartition("\t")[0] + "\n").encode("utf-8"))
    return sha.hexdigest()


class RunContext:
    """Output directory, merged config and manifest bookkeeping for one command."""

    def __init__(self, command: str, args: argparse.Namespace, config: Dict):
        self.command = command
        self.args = args
        self.config = config
        self.out_dir = Path(args.out)
        self.inputs: Dict[str, str] = {}
        self.extra: Dict = {}
        self.started_at = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")

    @property
    def seed(self) -> int:
        return int(self.config["run"]["seed"])

    @property
    def threads(self) -> int:
        return int(self.config["run"]["threads"])

    def input(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        resolved = Path(path)
        if not resolved.is_file():
            raise ConfigurationError(f"input file not found: {resolved}")
        self.inputs[str(resolved)] = file_digest(resolved)
        return resolved

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_frame(self, frame: pd.DataFrame, name: str) -> Path:
        target = self.path(name)
        frame.to_csv(target, **CSV_OPTIONS)
        return target

    def write_json(self, data: Dict, name: str) -> Path:
        target = self.path(name)
        with open(target, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
        return target

    def write_manifest(self) -> Path:
        outputs = {
            p.name: audit_digest(p) if p.name == AUDIT_NAME else file_digest(p)
            for p in sorted(self.out_dir.iterdir())
            if p.is_file() and p.name not in (MANIFEST_NAME, LOG_NAME)
        }
        manifest = {
            "command": self.command,
            "tool_version": __version__,
            "master_seed": self.seed,
            "inputs": self.inputs,
            "config": self.config,
            "outputs": outputs,
            "started_at": self.started_at,
            "finished_at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
            **self.extra,
        }
        return self.write_json(manifest, MANIFEST_NAME)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_cohort(ctx: RunContext) -> EncodedCohort:
    args = ctx.args
    if args.cohort:
        path = ctx.input(args.cohort)
        sidecar = columns_sidecar(path)
        if sidecar.is_file():
            ctx.input(str(sidecar))
        elif ctx.config["encoding"]["impute"] == "fold":
            logger.warning(f"{path} has no column document; fold imputation has no missing cells to fill")
        return EncodedCohort.from_csv(path)
    if args.subjects and args.catalog:
        ingest = read_subjects(ctx.input(args.subjects), ctx.config["plausibility"])
        catalog = FeatureCatalog.from_csv(ctx.input(args.catalog))
        ctx.extra["ingest_counts"] = ingest.counts
        return encode_cohort(
            ingest.subjects,
            catalog,
            ctx.config["encoding"]["normalization"],
            ctx.config["encoding"]["include_post_test_symptoms"],
        )
    raise ConfigurationError("provide --cohort, or --subjects together with --catalog")


def _score_outputs(ctx: RunContext, scores: np.ndarray, labels: np.ndarray) -> float:
    ok = np.isfinite(scores)
    roc = roc_curve(scores[ok], labels[ok])
    ctx.write_frame(roc.to_frame(), "roc.csv")
    betas = ctx.config["evaluation"]["betas"]
    ctx.write_frame(f_beta_curve(scores[ok], labels[ok], betas).to_frame(), "fbeta.csv")
    logger.info(f"✅ AUC = {roc.auc:.4f}")
    return roc.auc


def _forest_params(ctx: RunContext) -> ForestParams:
    return ForestParams.from_config(ctx.config["forest"], seed=ctx.seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(ctx: RunContext) -> None:
    data = json.loads(ctx.input(ctx.args.generator).read_text(encoding="utf-8"))
    if ctx.args.seed is not None:
        data["seed"] = ctx.args.seed
    ctx.config["run"]["seed"] = data.get("seed", 0)
    config = GeneratorConfig.from_dict(data)
    subjects, ground_truth = generate_cohort(config)
    write_cohort(subjects, ground_truth, config, ctx.out_dir)
    ctx.write_json(config.to_dict(), "generator.json")
    ctx.extra["n_subjects"] = len(subjects)
    ctx.extra["n_deaths"] = sum(1 for s in subjects if s.outcome.died)


def cmd_encode(ctx: RunContext) -> None:
    cohort = _load_cohort(ctx)
    cohort.to_csv(ctx.path("encoded.csv"))
    ctx.extra["n_subjects"] = cohort.n_subjects
    ctx.extra["n_features"] = cohort.n_features
    ctx.extra["warnings"] = list(cohort.warnings)


def cmd_stats(ctx: RunContext) -> None:
    args = ctx.args
    if args.subjects:
        ingest = read_subjects(ctx.input(args.subjects), ctx.config["plausibility"])
        catalog = FeatureCatalog.from_csv(ctx.input(args.catalog)) if args.catalog else None
        table = descriptive_stats(ingest.subjects, catalog, ctx.config["encoding"]["include_post_test_symptoms"])
    else:
        table = descriptive_stats(_load_cohort(ctx))
    ctx.write_frame(table, "stats.csv")


def _exclude(ctx: RunContext, cohort: EncodedCohort) -> EncodedCohort:
    if ctx.args.exclude_features:
        ctx.extra["excluded_features"] = list(ctx.args.exclude_features)
        return cohort.drop_features(ctx.args.exclude_features)
    return cohort


def cmd_loo_rf(ctx: RunContext) -> None:
    cohort = _exclude(ctx, _load_cohort(ctx))
    evaluation = ctx.config["evaluation"]
    result = run_loo(
        cohort,
        RandomForestTrainer(_forest_params(ctx)),
        seed=ctx.seed,
        threads=ctx.threads,
        impute=ctx.config["encoding"]["impute"],
        failure_tolerance=evaluation["failure_tolerance"],
    )
    ctx.write_frame(result.to_frame(), "scores.csv")
    ctx.write_frame(result.ranking_frame(), "ranking.csv")
    auc = _score_outputs(ctx, result.scores, result.labels)
    ctx.write_json({"auc": auc, "score_mode": "loo", "failed_iterations": len(result.failures)}, "summary.json")
    ctx.extra["n_iterations"] = result.n_iterations

    if ctx.args.final_model:
        seed = derive_seed(ctx.seed, "final")
        train = balance_all(cohort.labels, seed)
        params = ForestParams.from_config(ctx.config["forest"], seed=seed)
        forest = train_forest(cohort.matrix[train], cohort.labels[train], params, cohort.feature_names, ctx.threads)
        forest.save(ctx.path("forest.json"))
        rows = []
        for subject_id, x in zip(cohort.subject_ids, cohort.matrix):
            p = predict_with_ci(forest, x, evaluation["ci_level"], evaluation["ci_resamples"], seed)
            rows.append((subject_id, p.likelihood, p.ci_low, p.ci_high))
        ctx.write_frame(pd.DataFrame(rows, columns=["subject_id", "likelihood", "ci_low", "ci_high"]), "predictions.csv")


def _cox_cohort(ctx: RunContext) -> EncodedCohort:
    cohort = _exclude(ctx, _load_cohort(ctx))
    names: List[str] = []
    if getattr(ctx.args, "shortlist", None):
        names = RankedFeatureList.from_csv(ctx.input(ctx.args.shortlist)).names()
    if getattr(ctx.args, "features", None):
        names = list(ctx.args.features)
    if names:
        cohort = cohort.select_features(cohort.resolve_columns(names))
    return cohort


def cmd_loo_cox(ctx: RunContext) -> None:
    cohort = _cox_cohort(ctx)
    result = run_loo(
        cohort,
        CoxTrainer(CoxOptions.from_config(ctx.config["cox"])),
        seed=ctx.seed,
        threads=ctx.threads,
        impute=ctx.config["encoding"]["impute"],
        failure_tolerance=ctx.config["evaluation"]["failure_tolerance"],
    )
    ctx.write_frame(result.to_frame(), "scores.csv")
    auc = _score_outputs(ctx, result.scores, result.labels)
    ctx.write_json({"auc": auc, "score_mode": "loo", "failed_iterations": len(result.failures)}, "summary.json")
    ctx.extra["n_iterations"] = result.n_iterations


def cmd_fit_cox(ctx: RunContext) -> None:
    cohort = _cox_cohort(ctx)
    options = CoxOptions.from_config(ctx.config["cox"])
    model = fit_cox(cohort.matrix, cohort.survival_days, cohort.labels.astype(bool), cohort.feature_names, options)
    model.save(ctx.path("cox_model.json"))
    ctx.write_frame(hazard_ratio_report(model), "hazard_ratios.csv")
    ctx.extra["n_iterations"] = model.n_iterations
    ctx.extra["converged"] = model.converged

    mode = ctx.args.score_mode
    if mode == "loo":
        result = run_loo(
            cohort, CoxTrainer(options), seed=ctx.seed, threads=ctx.threads,
            impute=ctx.config["encoding"]["impute"], failure_tolerance=ctx.config["evaluation"]["failure_tolerance"],
        )
        scores = result.scores
    else:
        scores = cox_risk_scores(model, cohort.matrix)
    ctx.write_frame(
        pd.DataFrame({"subject_id": list(cohort.subject_ids), "label": cohort.labels, "score": scores}), "scores.csv"
    )
    auc = _score_outputs(ctx, scores, cohort.labels)
    ctx.write_json({"auc": auc, "score_mode": mode, "n_iterations": model.n_iterations}, "summary.json")


def cmd_select(ctx: RunContext) -> None:
    ranking = RankedFeatureList.from_csv(ctx.input(ctx.args.ranking))
    review = ReviewConfig.from_json(ctx.input(ctx.args.review)) if ctx.args.review else ReviewConfig()
    shortlist, audit = apply_review(ranking, review)
    shortlist.to_csv(ctx.path("shortlist.csv"), include_members=True)
    with open(ctx.path(AUDIT_NAME), "w", encoding="utf-8", newline="\n") as f:
        for entry in audit:
            f.write(entry.to_line() + "\n")
    if ctx.args.catalog:
        rebuild_catalog(shortlist, FeatureCatalog.from_csv(ctx.input(ctx.args.catalog))).to_csv(ctx.path("catalog.csv"))
    ctx.extra["shortlist_size"] = len(shortlist)


def cmd_compare(ctx: RunContext) -> None:
    cohort = _load_cohort(ctx)
    equation, coverage = load_equation(ctx.input(ctx.args.equation))
    report = compare_external(equation, cohort, ctx.config["evaluation"]["betas"])
    ctx.write_frame(
        pd.DataFrame({"subject_id": list(cohort.subject_ids), "stratum": list(report.strata), "label": cohort.labels,
                      "score": report.scores}),
        "scores.csv",
    )
    ctx.write_frame(report.metrics_frame(), "metrics.csv")
    ctx.write_frame(report.pooled_roc.to_frame(), "roc.csv")
    ctx.write_frame(report.pooled_f_beta.to_frame(), "fbeta.csv")
    ctx.path("coverage.txt").write_text("\n".join(coverage.to_lines()) + "\n", encoding="utf-8")
    logger.info(f"✅ Pooled external AUC = {report.pooled_roc.auc:.4f}")


COMMANDS = {
    "synth": cmd_synth,
    "encode": cmd_encode,
    "stats": cmd_stats,
    "loo-rf": cmd_loo_rf,
    "loo-cox": cmd_loo_cox,
    "fit-cox": cmd_fit_cox,
    "select": cmd_select,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="Output directory")
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--threads", type=int, help="Parallel width")

    cohort_inputs = argparse.ArgumentParser(add_help=False)
    cohort_inputs.add_argument("--cohort", help="Encoded cohort CSV")
    cohort_inputs.add_argument("--subjects", help="Subject JSON lines file")
    cohort_inputs.add_argument("--catalog", help="Feature catalog CSV")
    cohort_inputs.add_argument("--impute", choices=("cohort", "fold"), help="Imputation statistics scope")

    parser = argparse.ArgumentParser(prog="dynrisk", description="Dynamic mortality risk modelling pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic cohort")
    synth.add_argument("--generator", required=True, help="Generator config JSON")

    sub.add_parser("encode", parents=[common, cohort_inputs], help="Ingest and encode a cohort")
    sub.add_parser("stats", parents=[common, cohort_inputs], help="Descriptive statistics by outcome")

    loo_rf = sub.add_parser("loo-rf", parents=[common, cohort_inputs], help="Leave-one-out random forest")
    loo_rf.add_argument("--trees", type=int)
    loo_rf.add_argument("--mtry", type=int)
    loo_rf.add_argument("--exclude-features", nargs="+", default=[])
    loo_rf.add_argument("--final-model", action="store_true", help="Also fit and save a forest on the full cohort")

    for name, help_text in (("loo-cox", "Leave-one-out Cox model"), ("fit-cox", "Fit a Cox model and report HRs")):
        cox = sub.add_parser(name, parents=[common, cohort_inputs], help=help_text)
        cox.add_argument("--ties", choices=("efron", "breslow"))
        cox.add_argument("--features", nargs="+", help="Columns or catalog features to fit on")
        cox.add_argument("--shortlist", help="Shortlist CSV naming the features to fit on")
        cox.add_argument("--exclude-features", nargs="+", default=[])
        if name == "fit-cox":
            cox.add_argument("--score-mode", choices=("in_sample", "loo"), default="in_sample")

    select = sub.add_parser("select", parents=[common], help="Apply the review config to a ranking")
    select.add_argument("--ranking", required=True)
    select.add_argument("--review", help="Review config JSON; omitted means top-k only")
    select.add_argument("--catalog", help="Original catalog CSV to rebuild")

    compare = sub.add_parser("compare", parents=[common, cohort_inputs], help="Evaluate an external risk equation")
    compare.add_argument("--equation", required=True)
    return parser


def _apply_overrides(config: Dict, args: argparse.Namespace) -> Dict:
    if args.seed is not None:
        config["run"]["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigurationError("--threads must be at least 1")
        config["run"]["threads"] = args.threads
    if getattr(args, "trees", None) is not None:
        config["forest"]["n_trees"] = args.trees
    if getattr(args, "mtry", None) is not None:
        config["forest"]["mtry"] = args.mtry
    if getattr(args, "ties", None) is not None:
        config["cox"]["ties"] = args.ties
    if getattr(args, "impute", None) is not None:
        config["encoding"]["impute"] = args.impute
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Entry point.

    Returns:
        0 when every output was written, 1 on a pipeline error
    """
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out)
    configure_logging(out_dir)

    try:
        config = _apply_overrides(load_config(args.config), args)
        ctx = RunContext(args.command, args, config)
        if args.config:
            ctx.input(args.config)
        logger.info(f"🚀 dynrisk {args.command} (seed {ctx.seed}, {ctx.threads} thread(s)) -> {out_dir}")
        COMMANDS[args.command](ctx)
        ctx.write_manifest()
    except DynriskError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return 1
    except OSError as e:
        logger.error(f"❌ {args.command} failed: {e.strerror or e}: {e.filename}")
        return 1

    logger.info(f"✅ {args.command} finished; outputs in {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
