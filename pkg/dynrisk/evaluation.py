#!/usr/bin/env python3
"""
Evaluation harness
ROC/AUC and F-beta metrics, class balancing and leave-one-out cross-validation.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from .cohort_model import EncodedCohort
from .config import progress_enabled
from .cox_ph import CoxModel, CoxOptions, cox_risk_scores, fit_cox
from .exceptions import DynriskError, LeakageError, LooAbortedError, MetricDomainError, SkipIteration
from .random_forest import Forest, ForestParams, train_forest
from .seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

DEFAULT_BETAS = (0.5, 1.0, 2.0, 3.0, 5.0)
IMPUTE_MODES = ("cohort", "fold")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_scores(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricDomainError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.all(np.isfinite(scores)):
        raise MetricDomainError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise MetricDomainError("labels must be 0 or 1")
    if labels.min() == labels.max():
        raise MetricDomainError("both classes must be present")
    return scores, labels


def _threshold_counts(scores: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Cumulative (tp, fp) at each distinct score, descending; tied scores share one threshold.
    """
    order = np.argsort(-scores, kind="stable")
    ordered_scores = scores[order]
    ordered_labels = labels[order]
    ends = np.concatenate((np.flatnonzero(np.diff(ordered_scores) != 0), [len(scores) - 1]))
    tp = np.cumsum(ordered_labels)[ends]
    fp = ends + 1 - tp
    return ordered_scores[ends], tp.astype(np.int64), fp.astype(np.int64)


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # first point uses +inf
    auc: float

    @property
    def points(self) -> List[Tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"fpr": self.fpr, "tpr": self.tpr, "threshold": self.thresholds})


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """
    ROC curve over distinct score thresholds, with trapezoidal AUC.

    Args:
        scores: Higher means more likely positive
        labels: 0/1 outcomes

    Returns:
        RocCurve starting at (0, 0) and ending at (1, 1)
    """
    scores, labels = _check_scores(scores, labels)
    thresholds, tp, fp = _threshold_counts(scores, labels)
    tp = np.concatenate(([0], tp))
    fp = np.concatenate(([0], fp))
    positives, negatives = int(tp[-1]), int(fp[-1])

    # Integer trapezoid sum: 2 * concordant + tied pairs
    area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = area / (2 * positives * negatives)
    return RocCurve(
        fpr=fp / negatives,
        tpr=tp / positives,
        thresholds=np.concatenate(([np.inf], thresholds)),
        auc=auc,
    )


def auc_pair_oracle(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Brute-force Mann-Whitney AUC: (concordant + 0.5 * tied) / (n_pos * n_neg)."""
    scores, labels = _check_scores(scores, labels)
    pos = scores[labels == 1][:, None]
    neg = scores[labels == 0][None, :]
    concordant = int(np.sum(pos > neg))
    tied = int(np.sum(pos == neg))
    return (2 * concordant + tied) / (2 * pos.size * neg.size)


def f_beta(precision: float, recall: float, beta: float) -> float:
    """
    F-beta score (1 + b^2) P R / (b^2 P + R).

    Args:
        precision: In [0, 1]
        recall: In [0, 1]
        beta: Positive weight; beta > 1 favours recall

    Returns:
        Score in [0, 1]; 0 when precision and recall are both 0
    """
    if not beta > 0:
        raise MetricDomainError(f"beta must be positive, got {beta}")
    if not (0.0 <= precision <= 1.0 and 0.0 <= recall <= 1.0):
        raise MetricDomainError("precision and recall must lie in [0, 1]")
    if precision == 0.0 and recall == 0.0:
        return 0.0
    b2 = beta * beta
    return (1.0 + b2) * precision * recall / (b2 * precision + recall)


@dataclass(frozen=True, eq=False)
class FBetaCurve:
    betas: Tuple[float, ...]
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    per_beta: Dict[float, np.ndarray]

    def to_frame(self) -> pd.DataFrame:
        frames = [
            pd.DataFrame(
                {
                    "beta": beta,
                    "threshold": self.thresholds,
                    "precision": self.precision,
                    "recall": self.recall,
                    "f_score": self.per_beta[beta],
                }
            )
            for beta in self.betas
        ]
        return pd.concat(frames, ignore_index=True)


def f_beta_curve(
    scores: Sequence[float], labels: Sequence[int], betas: Sequence[float] = DEFAULT_BETAS
) -> FBetaCurve:
    """F-beta at every distinct threshold; predicted positive means score >= threshold."""
    scores, labels = _check_scores(scores, labels)
    thresholds, tp, fp = _threshold_counts(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    per_beta = {
        float(beta): np.array([f_beta(p, r, beta) for p, r in zip(precision, recall)]) for beta in betas
    }
    return FBetaCurve(
        betas=tuple(float(b) for b in betas),
        thresholds=thresholds,
        precision=precision,
        recall=recall,
        per_beta=per_beta,
    )


# ---------------------------------------------------------------------------
# Balancing
# ---------------------------------------------------------------------------


def _undersample(labels: np.ndarray, eligible: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    positives = eligible[labels[eligible] == 1]
    negatives = eligible[labels[eligible] == 0]
    if len(positives) == 0 or len(negatives) == 0:
        raise SkipIteration("a class is empty after exclusion")
    m = min(len(positives), len(negatives))
    chosen = np.concatenate(
        (rng.choice(positives, size=m, replace=False), rng.choice(negatives, size=m, replace=False))
    )
    return np.sort(chosen)


def balance_classes(labels: Sequence[int], heldout_index: int, seed: int) -> np.ndarray:
    """
    Undersample both classes to the minority count, without replacement, excluding the held-out row.

    Args:
        labels: 0/1 outcomes of the whole cohort
        heldout_index: Row left out of training
        seed: Iteration seed

    Returns:
        Sorted training indices, m per class
    """
    labels = np.asarray(labels, dtype=int)
    eligible = np.delete(np.arange(len(labels)), heldout_index)
    return _undersample(labels, eligible, np.random.default_rng(seed))


def balance_all(labels: Sequence[int], seed: int) -> np.ndarray:
    """Balanced training indices over the whole cohort (final model fit)."""
    labels = np.asarray(labels, dtype=int)
    return _undersample(labels, np.arange(len(labels)), np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------


class Trainer(Protocol):
    name: str

    def fit(self, X: np.ndarray, y: np.ndarray, time: np.ndarray, feature_names: Sequence[str], seed: int):
        ...

    def score(self, model, X: np.ndarray) -> np.ndarray:
        ...

    def importances(self, model) -> Optional[np.ndarray]:
        ...


@dataclass(frozen=True)
class RandomForestTrainer:
    params: ForestParams = field(default_factory=ForestParams)
    name: str = "rf"

    def fit(self, X, y, time, feature_names, seed) -> Forest:
        return train_forest(X, y, dataclasses.replace(self.params, seed=seed), feature_names)

    def score(self, model: Forest, X: np.ndarray) -> np.ndarray:
        return model.predict_many(X)

    def importances(self, model: Forest) -> Optional[np.ndarray]:
        return model.importances


@dataclass(frozen=True)
class CoxTrainer:
    options: CoxOptions = field(default_factory=CoxOptions)
    name: str = "cox"

    def fit(self, X, y, time, feature_names, seed) -> CoxModel:
        return fit_cox(X, time, y.astype(bool), feature_names, self.options)

    def score(self, model: CoxModel, X: np.ndarray) -> np.ndarray:
        return cox_risk_scores(model, X)

    def importances(self, model: CoxModel) -> Optional[np.ndarray]:
        return None


# ---------------------------------------------------------------------------
# Leave-one-out
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LooResult:
    subject_ids: Tuple[str, ...]
    labels: np.ndarray
    scores: np.ndarray  # NaN where the iteration failed
    feature_names: Tuple[str, ...]
    mean_importances: Optional[np.ndarray]
    n_iterations: int
    failures: Dict[int, str]
    train_class_counts: np.ndarray  # (n, 2): negatives, positives per iteration
    leakage_checks: int
    leaks: int = 0
    trainer: str = ""

    @property
    def per_sample(self) -> List[Tuple[int, int, float]]:
        return [(i, int(label), float(score)) for i, (label, score) in enumerate(zip(self.labels, self.scores))]

    def scored(self) -> Tuple[np.ndarray, np.ndarray]:
        """Scores and labels of iterations that produced a score."""
        ok = np.isfinite(self.scores)
        return self.scores[ok], self.labels[ok]

    def roc(self) -> RocCurve:
        return roc_curve(*self.scored())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"subject_id": list(self.subject_ids), "label": self.labels, "score": self.scores})

    def ranking_frame(self) -> pd.DataFrame:
        if self.mean_importances is None:
            raise MetricDomainError(f"{self.trainer} runs produce no importances")
        pairs = sorted(zip(self.feature_names, self.mean_importances.tolist()), key=lambda p: (-p[1], p[0]))
        return pd.DataFrame(
            [(rank, name, value) for rank, (name, value) in enumerate(pairs, start=1)],
            columns=["rank", "feature", "mean_importance"],
        )


@dataclass(frozen=True)
class _Iteration:
    index: int
    score: float
    importances: Optional[np.ndarray]
    class_counts: Tuple[int, int]
    failure: Optional[str] = None


def _training_matrix(cohort: EncodedCohort, train: np.ndarray, impute: str) -> np.ndarray:
    if impute == "fold":
        return cohort.fold_matrix(train)
    return cohort.matrix


def run_loo(
    cohort: EncodedCohort,
    trainer: Trainer,
    seed: int = 0,
    threads: int = 1,
    impute: str = "cohort",
    failure_tolerance: float = 0.01,
) -> LooResult:
    """
    Leave-one-out cross-validation with per-iteration class balancing.

    Args:
        cohort: Encoded cohort
        trainer: RandomForestTrainer or CoxTrainer
        seed: Master seed; iteration i uses derive_seed(seed, "loo", i)
        threads: Parallel width over iterations; results do not depend on it
        impute: "cohort" uses the cohort-level matrix, "fold" re-imputes from training rows
        failure_tolerance: Largest tolerated fraction of failed iterations

    Returns:
        LooResult with one held-out score per subject
    """
    if impute not in IMPUTE_MODES:
        raise MetricDomainError(f"impute must be one of {IMPUTE_MODES}")
    labels = np.asarray(cohort.labels, dtype=int)
    if labels.min() == labels.max():
        raise MetricDomainError("both classes must be present")
    n = cohort.n_subjects
    names = cohort.feature_names

    def iteration(i: int) -> _Iteration:
        iteration_seed = derive_seed(seed, "loo", i)
        try:
            train = balance_classes(labels, i, iteration_seed)
        except SkipIteration as e:
            return _Iteration(i, np.nan, None, (0, 0), failure=str(e))
        if np.any(train == i):
            raise LeakageError(f"held-out index {i} found in its training set")
        counts = (int(np.sum(labels[train] == 0)), int(np.sum(labels[train] == 1)))

        X = _training_matrix(cohort, train, impute)
        try:
            model = trainer.fit(X[train], labels[train], cohort.survival_days[train], names, iteration_seed)
            score = float(trainer.score(model, X[i : i + 1])[0])
        except (DynriskError, OverflowError) as e:
            return _Iteration(i, np.nan, None, counts, failure=f"{type(e).__name__}: {e}")
        return _Iteration(i, score, trainer.importances(model), counts)

    logger.info(f"Running LOO with {trainer.name} trainer over {n} subjects ({threads} thread(s))")
    iterable = tqdm(range(n), desc=f"LOO {trainer.name}", disable=not progress_enabled())
    outcomes = Parallel(n_jobs=threads, prefer="threads")(delayed(iteration)(i) for i in iterable)

    failures = {o.index: o.failure for o in outcomes if o.failure is not None}
    for index, message in failures.items():
        logger.warning(f"LOO iteration {index} failed: {message}")
    if len(failures) > failure_tolerance * n:
        raise LooAbortedError(f"{len(failures)} of {n} LOO iterations failed (tolerance {failure_tolerance:.1%})")

    # Fixed index-order reduction
    mean_importances = None
    collected = [o.importances for o in outcomes if o.importances is not None]
    if collected:
        total = np.zeros(len(names))
        for vector in collected:
            total = total + vector
        mean_importances = total / len(collected)

    logger.info(f"✅ LOO finished: {n - len(failures)} scored, {len(failures)} failed, 0 leaks")
    return LooResult(
        subject_ids=cohort.subject_ids,
        labels=labels,
        scores=np.array([o.score for o in outcomes], dtype=float),
        feature_names=names,
        mean_importances=mean_importances,
        n_iterations=n,
        failures=failures,
        train_class_counts=np.array([o.class_counts for o in outcomes], dtype=int),
        leakage_checks=n - sum(1 for o in outcomes if o.class_counts == (0, 0)),
        trainer=trainer.name,
    )


def run_kfold(cohort: EncodedCohort, trainer: Trainer, k: int = 2, seed: int = 0) -> np.ndarray:
    """
    Held-out scores from k balanced folds. k = 2 is the 50/50 holdout used to sanity-check LOO.
    """
    if not 2 <= k <= cohort.n_subjects:
        raise MetricDomainError(f"k must be in [2, {cohort.n_subjects}]")
    labels = np.asarray(cohort.labels, dtype=int)
    rng = derive_rng(seed, "kfold")
    folds = np.array_split(rng.permutation(cohort.n_subjects), k)
    scores = np.full(cohort.n_subjects, np.nan)
    for f, test in enumerate(folds):
        eligible = np.sort(np.concatenate([fold for g, fold in enumerate(folds) if g != f]))
        train = _undersample(labels, eligible, derive_rng(seed, "kfold", f))
        model = trainer.fit(
            cohort.matrix[train], labels[train], cohort.survival_days[train], cohort.feature_names,
            derive_seed(seed, "kfold", f),
        )
        scores[test] = trainer.score(model, cohort.matrix[test])
    return scores


def in_sample_scores(cohort: EncodedCohort, trainer: Trainer, seed: int = 0) -> Tuple[np.ndarray, object]:
    """Fit once on the whole cohort and score every subject with that model."""
    model = trainer.fit(cohort.matrix, cohort.labels, cohort.survival_days, cohort.feature_names, seed)
    return trainer.score(model, cohort.matrix), model
