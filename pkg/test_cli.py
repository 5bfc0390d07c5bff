#!/usr/bin/env python3
"""
Test the dynrisk command line end to end on small synthetic cohorts
"""

import datetime as dt
import json
import os
import sys
from functools import partial
from pathlib import Path

import pandas as pd
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from dynrisk import cli
from dynrisk.cli import MANIFEST_NAME, main
from dynrisk.feature_selection import apply_review

DATA_DIR = Path(__file__).parent / "data"

SMALL_GENERATOR = {
    "n_subjects": 120,
    "target_event_rate": 0.25,
    "planted_effects": [
        {"feature_name": "acute_kidney_failure", "log_hazard_ratio": 1.4},
        {"feature_name": "dementia", "log_hazard_ratio": 1.1},
        {"feature_name": "heart_failure", "log_hazard_ratio": 0.6},
    ],
    "feature_specs": [
        {"name": "acute_kidney_failure", "kind": "binary", "prevalence": 0.2},
        {"name": "dementia", "kind": "binary", "prevalence": 0.15},
        {"name": "heart_failure", "kind": "binary", "prevalence": 0.2},
        {"name": "hypertension", "kind": "binary", "prevalence": 0.35},
    ],
    "noise_features": 3,
    "seed": 11,
}


def manifest(out_dir: Path) -> dict:
    return json.loads((out_dir / MANIFEST_NAME).read_text(encoding="utf-8"))


def write_generator(path: Path, **overrides) -> Path:
    path.write_text(json.dumps({**SMALL_GENERATOR, **overrides}))
    return path


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generator = write_generator(root / "generator.json")
    out = root / "cohort"
    assert main(["synth", "--generator", str(generator), "--out", str(out)]) == 0
    return out


def cohort_args(synth_dir: Path):
    return ["--subjects", str(synth_dir / "subjects.jsonl"), "--catalog", str(synth_dir / "catalog.csv")]


def select_args(root: Path, synth_dir: Path):
    """Ranking and review files for `select`, written under root."""
    ranking = root / "ranking.csv"
    pd.DataFrame(
        {
            "rank": [1, 2, 3, 4, 5],
            "feature": ["acute_kidney_failure", "noise_01", "hypertension", "heart_failure", "noise_02"],
            "mean_importance": [0.4, 0.2, 0.15, 0.15, 0.1],
        }
    ).to_csv(ranking, index=False)
    review = root / "review.json"
    review.write_text(
        json.dumps(
            {
                "exclusions": [{"feature": "noise_01", "reason": "database_bias"}],
                "groupings": [{"group": "cardiovascular", "members": ["hypertension", "heart_failure"]}],
            }
        )
    )
    return ["--ranking", str(ranking), "--review", str(review), "--catalog", str(synth_dir / "catalog.csv")]


@pytest.fixture(scope="module")
def encoded_dir(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("encoded")
    assert main(["encode", *cohort_args(synth_dir), "--out", str(out)]) == 0
    return out


# ---------------------------------------------------------------------------
# synth / encode / stats
# ---------------------------------------------------------------------------


def test_synth_writes_cohort_and_manifest(synth_dir):
    for name in ("subjects.jsonl", "ground_truth.csv", "catalog.csv", "generator.json", "run.log"):
        assert (synth_dir / name).is_file()
    info = manifest(synth_dir)
    assert info["command"] == "synth"
    assert info["master_seed"] == 11
    assert info["n_subjects"] == 120
    assert "run.log" not in info["outputs"]
    assert MANIFEST_NAME not in info["outputs"]


def test_synth_rerun_is_byte_identical(synth_dir, tmp_path):
    generator = write_generator(tmp_path / "generator.json")
    assert main(["synth", "--generator", str(generator), "--out", str(tmp_path / "again")]) == 0
    assert manifest(tmp_path / "again")["outputs"] == manifest(synth_dir)["outputs"]


def test_unreachable_event_rate_fails(tmp_path):
    generator = write_generator(tmp_path / "generator.json", target_event_rate=1.5)
    assert main(["synth", "--generator", str(generator), "--out", str(tmp_path / "out")]) == 1
    assert not (tmp_path / "out" / MANIFEST_NAME).exists()


def test_missing_input_file_fails(tmp_path):
    out = tmp_path / "out"
    assert main(["encode", "--cohort", str(tmp_path / "nowhere.csv"), "--out", str(out)]) == 1
    assert "input file not found" in (out / "run.log").read_text(encoding="utf-8")


def test_encode_without_inputs_fails(tmp_path):
    assert main(["encode", "--out", str(tmp_path / "out")]) == 1


def test_encode_and_stats(synth_dir, tmp_path):
    out = tmp_path / "encoded"
    assert main(["encode", *cohort_args(synth_dir), "--out", str(out)]) == 0
    encoded = pd.read_csv(out / "encoded.csv")
    assert len(encoded) == 120
    info = manifest(out)
    assert info["ingest_counts"]["subjects"] == 120
    assert set(info["inputs"]) == {str(synth_dir / "subjects.jsonl"), str(synth_dir / "catalog.csv")}

    stats_out = tmp_path / "stats"
    assert main(["stats", "--cohort", str(out / "encoded.csv"), "--out", str(stats_out)]) == 0
    table = pd.read_csv(stats_out / "stats.csv")
    assert "dementia" in set(table["feature"])


# ---------------------------------------------------------------------------
# Leave-one-out and Cox
# ---------------------------------------------------------------------------


def test_loo_rf_identical_across_thread_counts(synth_dir, tmp_path):
    outputs = {}
    for threads in (1, 8):
        out = tmp_path / f"loo_{threads}"
        argv = ["loo-rf", *cohort_args(synth_dir), "--trees", "5", "--seed", "3", "--threads", str(threads)]
        assert main([*argv, "--out", str(out)]) == 0
        outputs[threads] = manifest(out)["outputs"]
        assert manifest(out)["n_iterations"] == 120
    assert outputs[1] == outputs[8]
    assert {"scores.csv", "ranking.csv", "roc.csv", "fbeta.csv", "summary.json"} <= set(outputs[1])


def test_loo_rf_excluding_age(synth_dir, tmp_path):
    out = tmp_path / "no_age"
    argv = ["loo-rf", *cohort_args(synth_dir), "--trees", "5", "--exclude-features", "age", "--out", str(out)]
    assert main(argv) == 0
    ranking = pd.read_csv(out / "ranking.csv")
    assert "age" not in set(ranking["feature"])
    assert manifest(out)["excluded_features"] == ["age"]


def test_unknown_excluded_feature_fails(synth_dir, tmp_path):
    argv = ["loo-rf", *cohort_args(synth_dir), "--exclude-features", "shoe_size", "--out", str(tmp_path / "out")]
    assert main(argv) == 1


def test_invalid_thread_count(synth_dir, tmp_path):
    argv = ["loo-rf", *cohort_args(synth_dir), "--threads", "0", "--out", str(tmp_path / "out")]
    assert main(argv) == 1


def test_fit_cox_reports_hazard_ratios(synth_dir, tmp_path):
    out = tmp_path / "cox"
    features = ["acute_kidney_failure", "dementia", "heart_failure"]
    assert main(["fit-cox", *cohort_args(synth_dir), "--features", *features, "--out", str(out)]) == 0

    report = pd.read_csv(out / "hazard_ratios.csv")
    assert set(report["feature"]) == set(features)
    assert (report["ci_low"] <= report["hr"]).all() and (report["hr"] <= report["ci_high"]).all()
    info = manifest(out)
    assert info["n_iterations"] >= 1
    assert info["converged"] is True
    summary = json.loads((out / "summary.json").read_text())
    assert summary["score_mode"] == "in_sample"


def test_loo_cox_and_loo_scored_fit(synth_dir, tmp_path):
    features = ["acute_kidney_failure", "dementia"]
    loo_out = tmp_path / "loo_cox"
    assert main(["loo-cox", *cohort_args(synth_dir), "--features", *features, "--out", str(loo_out)]) == 0
    assert manifest(loo_out)["n_iterations"] == 120
    assert len(pd.read_csv(loo_out / "scores.csv")) == 120

    fit_out = tmp_path / "fit_cox_loo"
    argv = ["fit-cox", *cohort_args(synth_dir), "--features", *features, "--score-mode", "loo"]
    assert main([*argv, "--out", str(fit_out)]) == 0
    assert json.loads((fit_out / "summary.json").read_text())["score_mode"] == "loo"
    loo_scores = pd.read_csv(loo_out / "scores.csv")["score"]
    assert pd.read_csv(fit_out / "scores.csv")["score"].tolist() == loo_scores.tolist()


def test_fit_cox_separation_names_feature(tmp_path):
    cohort = tmp_path / "separated.csv"
    pd.DataFrame(
        {
            "exposure": [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            "__label": [1] * 6,
            "__survival_days": [1, 2, 3, 4, 5, 6],
            "__subject_id": [f"S{i}" for i in range(6)],
        }
    ).to_csv(cohort, index=False)
    out = tmp_path / "out"
    assert main(["fit-cox", "--cohort", str(cohort), "--out", str(out)]) == 1
    log = (out / "run.log").read_text(encoding="utf-8")
    assert "separation" in log and "'exposure'" in log


# ---------------------------------------------------------------------------
# select / compare
# ---------------------------------------------------------------------------


def test_select_with_review_and_catalog(synth_dir, tmp_path):
    out = tmp_path / "select"
    assert main(["select", *select_args(tmp_path, synth_dir), "--out", str(out)]) == 0

    shortlist = pd.read_csv(out / "shortlist.csv")
    assert list(shortlist["feature"]) == ["acute_kidney_failure", "cardiovascular", "noise_02"]
    audit = (out / "audit.log").read_text(encoding="utf-8").splitlines()
    assert [line.split("\t")[:2] for line in audit] == [["noise_01", "excluded"], ["cardiovascular", "grouped"]]
    assert (out / "catalog.csv").is_file()
    assert manifest(out)["shortlist_size"] == 3


def test_select_digest_ignores_audit_timestamps(synth_dir, tmp_path, monkeypatch):
    argv = ["select", *select_args(tmp_path, synth_dir)]
    outputs, audits = [], []
    for hour in (9, 17):
        now = dt.datetime(2021, 3, 1, hour, tzinfo=dt.timezone.utc)
        monkeypatch.setattr(cli, "apply_review", partial(apply_review, now=now))
        out = tmp_path / f"select_{hour}"
        assert main([*argv, "--out", str(out)]) == 0
        outputs.append(manifest(out)["outputs"])
        audits.append((out / "audit.log").read_text(encoding="utf-8"))
    assert audits[0] != audits[1]
    assert "2021-03-01T09:00:00+00:00" in audits[0]
    assert outputs[0] == outputs[1]


def test_select_without_review_keeps_ranking(tmp_path):
    ranking = tmp_path / "ranking.csv"
    pd.DataFrame({"feature": ["b", "a"], "mean_importance": [0.7, 0.3]}).to_csv(ranking, index=False)
    out = tmp_path / "select"
    assert main(["select", "--ranking", str(ranking), "--out", str(out)]) == 0
    assert list(pd.read_csv(out / "shortlist.csv")["feature"]) == ["b", "a"]
    assert (out / "audit.log").read_text(encoding="utf-8") == ""


def test_compare_external_equation(synth_dir, tmp_path):
    out = tmp_path / "compare"
    argv = ["compare", *cohort_args(synth_dir), "--equation", str(DATA_DIR / "example_equation.json")]
    assert main([*argv, "--out", str(out)]) == 0

    metrics = pd.read_csv(out / "metrics.csv")
    assert list(metrics["stratum"]) == ["pooled", "male", "female"]
    assert metrics.loc[0, "n"] == 120
    assert "missing\tchemotherapy_grade" in (out / "coverage.txt").read_text(encoding="utf-8")
    scores = pd.read_csv(out / "scores.csv")
    assert set(scores["stratum"]) == {"male", "female"}


# ---------------------------------------------------------------------------
# Same cohort, two routes
# ---------------------------------------------------------------------------


def test_encoded_csv_and_subjects_give_same_results(synth_dir, encoded_dir, tmp_path):
    """An exported cohort scores and summarises in original units, like the subject file it came from."""
    assert (encoded_dir / "encoded.columns.json").is_file()
    assert "encoded.columns.json" in manifest(encoded_dir)["outputs"]
    routes = {"subjects": cohort_args(synth_dir), "cohort": ["--cohort", str(encoded_dir / "encoded.csv")]}
    equation = ["--equation", str(DATA_DIR / "example_equation.json")]
    for name, inputs in routes.items():
        assert main(["compare", *inputs, *equation, "--out", str(tmp_path / f"compare_{name}")]) == 0
        assert main(["stats", *inputs, "--out", str(tmp_path / f"stats_{name}")]) == 0

    for command, files in (("compare", ("scores.csv", "metrics.csv", "roc.csv", "fbeta.csv")), ("stats", ("stats.csv",))):
        for file_name in files:
            by_subjects = (tmp_path / f"{command}_subjects" / file_name).read_bytes()
            by_cohort = (tmp_path / f"{command}_cohort" / file_name).read_bytes()
            assert by_subjects == by_cohort, f"{command}/{file_name}"

    inputs = manifest(tmp_path / "compare_cohort")["inputs"]
    assert str(encoded_dir / "encoded.columns.json") in inputs
    age = pd.read_csv(tmp_path / "stats_cohort" / "stats.csv").set_index("feature").loc["age"]
    assert age["mean"] > 18.0


# ---------------------------------------------------------------------------
# Reruns across thread counts
# ---------------------------------------------------------------------------

COX_FEATURES = ["--features", "acute_kidney_failure", "dementia"]
RERUNS = {
    "encode": ["encode"],
    "stats": ["stats"],
    "loo-cox": ["loo-cox", *COX_FEATURES],
    "fit-cox-in-sample": ["fit-cox", *COX_FEATURES],
    "fit-cox-loo": ["fit-cox", *COX_FEATURES, "--score-mode", "loo"],
    "compare": ["compare", "--equation", str(DATA_DIR / "example_equation.json")],
}


@pytest.mark.parametrize("command", [*RERUNS, "select"])
def test_rerun_identical_across_thread_counts(command, synth_dir, tmp_path):
    if command == "select":
        argv = ["select", *select_args(tmp_path, synth_dir)]
    else:
        argv = [*RERUNS[command], *cohort_args(synth_dir)]
    runs = []
    for threads in (1, 8, 8):
        out = tmp_path / f"run_{len(runs)}"
        assert main([*argv, "--seed", "5", "--threads", str(threads), "--out", str(out)]) == 0
        runs.append(manifest(out)["outputs"])
    assert runs[0]
    assert runs[0] == runs[1] == runs[2]
