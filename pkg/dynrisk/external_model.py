#!/usr/bin/env python3
"""
External risk equations
Loads per-stratum published-style risk equations and scores an encoded cohort with them.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from .cohort_model import EncodedCohort
from .evaluation import DEFAULT_BETAS, FBetaCurve, RocCurve, f_beta_curve, roc_curve
from .exceptions import CatalogError, EquationError, StratumError

logger = logging.getLogger(__name__)

MISSING = "MISSING"


class Transform(Enum):
    LINEAR_PREDICTOR = "linear_predictor"
    LOGISTIC = "logistic"


class MissingPolicy(Enum):
    DROP_TERM = "drop_term"
    IMPUTE_MEAN = "impute_mean"


@dataclass(frozen=True)
class Stratum:
    label: str
    intercept: float
    transform: Transform
    terms: Tuple[Tuple[str, float], ...]


@dataclass(frozen=True)
class ExternalRiskEquation:
    """
    Equation file (JSON):
      {"stratify_by": {"feature": "sex_male", "levels": {"1": "male", "0": "female"}},
       "strata": {"male": {"intercept": 0.0, "transform": "linear_predictor",
                           "terms": [["age", 0.05], ["chemo_grade", 0.4]]}, ...},
       "variable_mapping": {"age": "age", "chemo_grade": "MISSING"},
       "missing_policy": "drop_term",
       "reference_means": {"chemo_grade": 0.1}}
    Without stratify_by there must be exactly one stratum, applied to everyone.
    """

    strata: Dict[str, Stratum]
    variable_mapping: Dict[str, str]
    missing_policy: MissingPolicy = MissingPolicy.DROP_TERM
    stratify_feature: Optional[str] = None
    stratum_levels: Dict[str, str] = field(default_factory=dict)
    reference_means: Dict[str, float] = field(default_factory=dict)

    def missing_variables(self) -> List[str]:
        return sorted(v for v, target in self.variable_mapping.items() if target == MISSING)


@dataclass(frozen=True)
class CoverageReport:
    declared: Tuple[str, ...]
    mapped: Tuple[str, ...]
    missing: Tuple[str, ...]

    def to_lines(self) -> List[str]:
        return [f"declared\t{len(self.declared)}", f"mapped\t{len(self.mapped)}"] + [
            f"missing\t{name}" for name in self.missing
        ]


def _number(value, location: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise EquationError(f"expected a finite number, got {value!r}", location)
    return float(value)


def _parse_stratum(label: str, block, mapping: Dict[str, str]) -> Stratum:
    where = f"strata.{label}"
    if not isinstance(block, dict):
        raise EquationError("stratum block must be an object", where)
    try:
        transform = Transform(block.get("transform", "linear_predictor"))
    except ValueError as e:
        raise EquationError(f"unknown transform {block.get('transform')!r}", f"{where}.transform") from e
    terms = []
    raw_terms = block.get("terms", [])
    if not isinstance(raw_terms, list):
        raise EquationError("terms must be a list", f"{where}.terms")
    for i, term in enumerate(raw_terms):
        location = f"{where}.terms[{i}]"
        if not isinstance(term, (list, tuple)) or len(term) != 2 or not isinstance(term[0], str):
            raise EquationError("term must be [variable, coefficient]", location)
        if term[0] not in mapping:
            raise EquationError(f"variable '{term[0]}' has no entry in variable_mapping", location)
        terms.append((term[0], _number(term[1], location)))
    return Stratum(label, _number(block.get("intercept", 0.0), f"{where}.intercept"), transform, tuple(terms))


def load_equation(path: Union[str, Path]) -> Tuple[ExternalRiskEquation, CoverageReport]:
    """
    Parse and validate an equation file.

    Args:
        path: JSON equation file

    Returns:
        (equation, coverage report listing MISSING-mapped variables)
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise EquationError(f"invalid JSON ({e.msg})", f"{path}:{e.lineno}") from e
    if not isinstance(data, dict):
        raise EquationError("top level must be an object", str(path))
    return parse_equation(data)


def parse_equation(data: Dict) -> Tuple[ExternalRiskEquation, CoverageReport]:
    mapping = data.get("variable_mapping", {})
    if not isinstance(mapping, dict) or not all(isinstance(v, str) for v in mapping.values()):
        raise EquationError("variable_mapping must map names to feature names or MISSING", "variable_mapping")

    raw_strata = data.get("strata")
    if not isinstance(raw_strata, dict) or not raw_strata:
        raise EquationError("at least one stratum is required", "strata")
    strata = {str(label): _parse_stratum(str(label), block, mapping) for label, block in raw_strata.items()}

    try:
        policy = MissingPolicy(data.get("missing_policy", "drop_term"))
    except ValueError as e:
        raise EquationError(f"unknown missing_policy {data.get('missing_policy')!r}", "missing_policy") from e

    stratify = data.get("stratify_by")
    feature, levels = None, {}
    if stratify is not None:
        if not isinstance(stratify, dict) or "feature" not in stratify or not isinstance(stratify.get("levels"), dict):
            raise EquationError("stratify_by needs 'feature' and 'levels'", "stratify_by")
        feature = str(stratify["feature"])
        levels = {str(k): str(v) for k, v in stratify["levels"].items()}
        for value, label in levels.items():
            if label not in strata:
                raise EquationError(f"level {value!r} maps to unknown stratum '{label}'", f"stratify_by.levels.{value}")
        unmapped = set(strata) - set(levels.values())
        if unmapped:
            raise EquationError(f"strata {sorted(unmapped)} are not reachable from any level", "stratify_by.levels")
    elif len(strata) != 1:
        raise EquationError("several strata need a stratify_by block", "stratify_by")

    declared = tuple(dict.fromkeys(var for s in strata.values() for var, _ in s.terms))
    missing = tuple(var for var in declared if mapping[var] == MISSING)

    reference_means = {}
    if policy is MissingPolicy.IMPUTE_MEAN:
        raw_means = data.get("reference_means", {})
        for var in missing:
            if var not in raw_means:
                raise EquationError(f"impute_mean needs a reference mean for '{var}'", f"reference_means.{var}")
            reference_means[var] = _number(raw_means[var], f"reference_means.{var}")

    equation = ExternalRiskEquation(strata, dict(mapping), policy, feature, levels, reference_means)
    coverage = CoverageReport(declared, tuple(v for v in declared if v not in missing), missing)
    if missing:
        logger.warning(f"{len(missing)} equation variable(s) have no cohort counterpart: {list(missing)}")
    logger.info(f"Loaded equation with {len(strata)} stratum/strata and {len(declared)} variable(s)")
    return equation, coverage


def _level_key(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def assign_strata(equation: ExternalRiskEquation, cohort: EncodedCohort) -> List[str]:
    """Stratum label of every subject."""
    if equation.stratify_feature is None:
        (only,) = equation.strata
        return [only] * cohort.n_subjects
    try:
        column = cohort.column_index(equation.stratify_feature)
    except CatalogError as e:
        raise EquationError(f"stratification feature '{equation.stratify_feature}' not in cohort", "stratify_by") from e
    values = cohort.imputed_values()[:, column]
    labels = []
    for subject_id, value in zip(cohort.subject_ids, values):
        label = equation.stratum_levels.get(_level_key(value))
        if label is None:
            raise StratumError(subject_id, value)
        labels.append(label)
    return labels


def evaluate_external(equation: ExternalRiskEquation, cohort: EncodedCohort) -> np.ndarray:
    """
    Score every subject with its stratum's equation on unscaled, imputed features.

    Args:
        equation: Validated equation
        cohort: Encoded cohort

    Returns:
        One score per subject, in cohort order
    """
    columns = {}
    for var, target in equation.variable_mapping.items():
        if target == MISSING:
            continue
        if target not in cohort.feature_names:
            raise EquationError(f"mapped feature '{target}' not in cohort", f"variable_mapping.{var}")
        columns[var] = cohort.feature_names.index(target)

    values = cohort.imputed_values()
    labels = np.array(assign_strata(equation, cohort))
    scores = np.zeros(cohort.n_subjects)
    for label, stratum in equation.strata.items():
        rows = labels == label
        lp = np.full(int(rows.sum()), stratum.intercept)
        for var, coefficient in stratum.terms:
            if var in columns:
                lp = lp + coefficient * values[rows, columns[var]]
            elif equation.missing_policy is MissingPolicy.IMPUTE_MEAN:
                lp = lp + coefficient * equation.reference_means[var]
        scores[rows] = expit(lp) if stratum.transform is Transform.LOGISTIC else lp
    return scores


@dataclass(frozen=True, eq=False)
class ComparisonReport:
    scores: np.ndarray
    strata: Tuple[str, ...]
    pooled_roc: RocCurve
    pooled_f_beta: FBetaCurve
    per_stratum: pd.DataFrame  # stratum, n, n_died, auc

    def metrics_frame(self) -> pd.DataFrame:
        pooled = pd.DataFrame(
            [("pooled", len(self.scores), int(self.per_stratum["n_died"].sum()), self.pooled_roc.auc)],
            columns=["stratum", "n", "n_died", "auc"],
        )
        return pd.concat([pooled, self.per_stratum], ignore_index=True)


def compare_external(
    equation: ExternalRiskEquation, cohort: EncodedCohort, betas=DEFAULT_BETAS
) -> ComparisonReport:
    """Pooled ROC / F-beta plus per-stratum AUC of an external equation on a cohort."""
    scores = evaluate_external(equation, cohort)
    strata = np.array(assign_strata(equation, cohort))
    labels = np.asarray(cohort.labels, dtype=int)

    rows = []
    for label in equation.strata:
        mask = strata == label
        n_died = int(labels[mask].sum())
        if mask.sum() == 0 or n_died in (0, int(mask.sum())):
            logger.warning(f"Stratum '{label}' lacks one outcome class; AUC not defined")
            auc = float("nan")
        else:
            auc = roc_curve(scores[mask], labels[mask]).auc
        rows.append((label, int(mask.sum()), n_died, auc))

    return ComparisonReport(
        scores=scores,
        strata=tuple(strata.tolist()),
        pooled_roc=roc_curve(scores, labels),
        pooled_f_beta=f_beta_curve(scores, labels, betas),
        per_stratum=pd.DataFrame(rows, columns=["stratum", "n", "n_died", "auc"]),
    )
