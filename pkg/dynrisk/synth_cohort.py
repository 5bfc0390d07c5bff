#!/usr/bin/env python3
"""
Synthetic cohort generator with planted hazard structure.
Stands in for the access-gated cohort: survival times follow an exponential
proportional-hazards model whose true linear predictor is known per subject.
"""

import datetime as dt
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import optimize

from .cohort_model import (
    CatalogEntry,
    ClinicalEvent,
    Encoding,
    EventSource,
    FeatureCatalog,
    FeatureClass,
    Matcher,
    Outcome,
    Sex,
    SubjectRecord,
    write_subjects,
)
from .exceptions import ConfigurationError
from .seeding import derive_rng

logger = logging.getLogger(__name__)

BLOCK_SIZE = 1024
PILOT_SIZE = 100_000
CALIBRATION_TOLERANCE = 0.002
RESERVED_NAMES = {"age", "sex_male"}


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # binary | continuous
    prevalence: float = 0.5
    mean: float = 0.0
    sd: float = 1.0


@dataclass(frozen=True)
class PlantedEffect:
    feature_name: str
    log_hazard_ratio: float


@dataclass(frozen=True)
class GeneratorConfig:
    n_subjects: int
    target_event_rate: float
    planted_effects: Tuple[PlantedEffect, ...]
    feature_specs: Tuple[FeatureSpec, ...]
    noise_features: int = 0
    noise_prevalence: float = 0.5
    baseline_hazard_scale: float = 1e-3
    calibrate: bool = True
    censor_horizon_days: int = 90
    seed: int = 0
    index_start: str = "2020-03-01"
    index_span_days: int = 270

    def __post_init__(self):
        if not isinstance(self.n_subjects, int) or self.n_subjects <= 0:
            raise ConfigurationError(f"n_subjects must be a positive integer, got {self.n_subjects!r}")
        if not 0.0 < self.target_event_rate < 1.0:
            raise ConfigurationError(f"target_event_rate must be in (0, 1), got {self.target_event_rate!r}")
        if self.baseline_hazard_scale <= 0:
            raise ConfigurationError("baseline_hazard_scale must be positive")
        if not isinstance(self.censor_horizon_days, int) or self.censor_horizon_days <= 0:
            raise ConfigurationError("censor_horizon_days must be a positive integer")
        if self.noise_features < 0:
            raise ConfigurationError("noise_features must be non-negative")
        if not 0.0 < self.noise_prevalence < 1.0:
            raise ConfigurationError("noise_prevalence must be in (0, 1)")
        try:
            dt.date.fromisoformat(self.index_start)
        except ValueError as e:
            raise ConfigurationError(f"index_start: {e}") from e

        names = set()
        for spec in self.feature_specs:
            if spec.name in names or spec.name in RESERVED_NAMES:
                raise ConfigurationError(f"feature_specs: duplicate or reserved name '{spec.name}'")
            names.add(spec.name)
            if spec.kind == "binary":
                if not 0.0 < spec.prevalence < 1.0:
                    raise ConfigurationError(f"feature_specs.{spec.name}.prevalence must be in (0, 1)")
            elif spec.kind == "continuous":
                if spec.sd <= 0:
                    raise ConfigurationError(f"feature_specs.{spec.name}.sd must be positive")
            else:
                raise ConfigurationError(f"feature_specs.{spec.name}.kind must be binary or continuous")

        if not self.planted_effects:
            raise ConfigurationError("planted_effects must contain at least one effect")
        for effect in self.planted_effects:
            if effect.feature_name not in names:
                raise ConfigurationError(f"planted_effects: '{effect.feature_name}' is not in feature_specs")

    @property
    def feature_names(self) -> List[str]:
        return [spec.name for spec in self.all_specs()]

    def all_specs(self) -> List[FeatureSpec]:
        noise = [
            FeatureSpec(name=f"noise_{k:02d}", kind="binary", prevalence=self.noise_prevalence)
            for k in range(1, self.noise_features + 1)
        ]
        return list(self.feature_specs) + noise

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "GeneratorConfig":
        try:
            values = dict(data)
            values["planted_effects"] = tuple(PlantedEffect(**e) for e in values.get("planted_effects", []))
            values["feature_specs"] = tuple(FeatureSpec(**s) for s in values.get("feature_specs", []))
            return cls(**values)
        except TypeError as e:
            raise ConfigurationError(f"generator config: {e}") from e

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "GeneratorConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)


def feature_code(index: int) -> str:
    """Fixed-width event code for the index-th generated feature (no prefix collisions)."""
    return f"SYN{index:04d}"


def synthetic_catalog(config: GeneratorConfig) -> FeatureCatalog:
    """Catalog that encodes exactly the generated features plus demographics."""
    entries = [
        CatalogEntry("age", Matcher("demographic", ("age",)), FeatureClass.BASELINE, "demographics", Encoding.CONTINUOUS),
        CatalogEntry(
            "sex_male", Matcher("demographic", ("sex",)), FeatureClass.BASELINE, "demographics", Encoding.BINARY_PRESENCE
        ),
    ]
    for index, spec in enumerate(config.all_specs()):
        if spec.kind == "binary":
            entries.append(
                CatalogEntry(
                    spec.name, Matcher("code", (feature_code(index),)), FeatureClass.CHRONIC, None, Encoding.BINARY_PRESENCE
                )
            )
        else:
            entries.append(
                CatalogEntry(spec.name, Matcher("baseline", (spec.name,)), FeatureClass.BASELINE, None, Encoding.CONTINUOUS)
            )
    return FeatureCatalog(tuple(entries))


def _draw_covariates(specs: Sequence[FeatureSpec], n: int, rng: np.random.Generator) -> np.ndarray:
    X = np.empty((n, len(specs)), dtype=float)
    for j, spec in enumerate(specs):
        if spec.kind == "binary":
            X[:, j] = (rng.random(n) < spec.prevalence).astype(float)
        else:
            X[:, j] = rng.normal(spec.mean, spec.sd, n)
    return X


def _linear_predictor(X: np.ndarray, names: Sequence[str], effects: Sequence[PlantedEffect]) -> np.ndarray:
    # Same summation order as oracle_score, so both give identical floats
    lp = np.zeros(X.shape[0], dtype=float)
    for effect in effects:
        lp = lp + effect.log_hazard_ratio * X[:, names.index(effect.feature_name)]
    return lp


def _event_rate(scale: float, risk: np.ndarray, exposure: np.ndarray) -> float:
    # died iff -log(U) < scale * exp(lp) * horizon
    return float(np.mean(exposure < scale * risk))


def calibrate_baseline_hazard(config: GeneratorConfig) -> float:
    """
    Solve for the baseline hazard so the event rate on a pilot sample matches the target.

    Args:
        config: Generator configuration

    Returns:
        Calibrated baseline hazard per day
    """
    if not config.calibrate:
        return config.baseline_hazard_scale

    rng = derive_rng(config.seed, "pilot")
    specs = config.all_specs()
    X = _draw_covariates(specs, PILOT_SIZE, rng)
    risk = np.exp(_linear_predictor(X, config.feature_names, config.planted_effects)) * config.censor_horizon_days
    exposure = -np.log(1.0 - rng.random(PILOT_SIZE))

    target = config.target_event_rate
    low, high = -60.0, 20.0  # log-scale bracket

    def excess(log_scale: float) -> float:
        return _event_rate(math.exp(log_scale), risk, exposure) - target

    if not excess(low) < 0.0 < excess(high):
        raise ConfigurationError(f"target_event_rate {target} is unreachable for this configuration")

    # the pilot rate is a step function; brentq lands on the step that crosses the target
    log_scale = optimize.brentq(excess, low, high, xtol=1e-10, maxiter=500)
    rate = excess(log_scale) + target
    if abs(rate - target) > CALIBRATION_TOLERANCE:
        raise ConfigurationError(f"could not calibrate baseline hazard to target_event_rate {target} (last rate {rate})")
    logger.debug(f"Calibrated baseline hazard {math.exp(log_scale):.4g} (pilot rate {rate:.4f})")
    return math.exp(log_scale)


@dataclass(frozen=True)
class SimulatedArrays:
    feature_names: Tuple[str, ...]
    X: np.ndarray
    linear_predictor: np.ndarray
    survival_days: np.ndarray
    died: np.ndarray
    ages: np.ndarray
    male: np.ndarray
    test_offsets: np.ndarray
    event_offsets: np.ndarray
    baseline_hazard_scale: float = field(default=0.0)


def simulate_arrays(config: GeneratorConfig) -> SimulatedArrays:
    """
    Draw covariates, demographics and survival outcomes as arrays.

    Subjects are drawn in blocks of BLOCK_SIZE; block b uses the stream derived
    from (seed, "subjects", b), so blocks can be generated independently.
    """
    scale = calibrate_baseline_hazard(config)
    specs = config.all_specs()
    names = config.feature_names
    horizon = config.censor_horizon_days

    parts = []
    for block, start in enumerate(range(0, config.n_subjects, BLOCK_SIZE)):
        n = min(BLOCK_SIZE, config.n_subjects - start)
        rng = derive_rng(config.seed, "subjects", block)
        X = _draw_covariates(specs, n, rng)
        ages = np.round(rng.uniform(40.0, 80.0, n), 1)
        male = rng.random(n) < 0.5
        test_offsets = rng.integers(0, config.index_span_days + 1, n)
        event_offsets = rng.integers(30, 3651, (n, len(specs)))
        uniforms = 1.0 - rng.random(n)
        parts.append((X, ages, male, test_offsets, event_offsets, uniforms))

    X = np.vstack([p[0] for p in parts])
    uniforms = np.concatenate([p[5] for p in parts])
    lp = _linear_predictor(X, names, config.planted_effects)
    times = -np.log(uniforms) / (scale * np.exp(lp))
    died = times < horizon
    survival = np.where(died, np.floor(times), horizon).astype(int)

    logger.info(
        f"Simulated {config.n_subjects} subjects: {int(died.sum())} deaths "
        f"({died.mean():.3%}, target {config.target_event_rate:.3%})"
    )
    return SimulatedArrays(
        feature_names=tuple(names),
        X=X,
        linear_predictor=lp,
        survival_days=survival,
        died=died,
        ages=np.concatenate([p[1] for p in parts]),
        male=np.concatenate([p[2] for p in parts]),
        test_offsets=np.concatenate([p[3] for p in parts]),
        event_offsets=np.vstack([p[4] for p in parts]),
        baseline_hazard_scale=scale,
    )


def generate_cohort(config: GeneratorConfig) -> Tuple[List[SubjectRecord], Dict[str, float]]:
    """
    Generate subject records with planted hazard structure.

    Args:
        config: Generator configuration

    Returns:
        (subjects, ground_truth) where ground_truth maps subject_id to the true linear predictor
    """
    arrays = simulate_arrays(config)
    specs = config.all_specs()
    start = dt.date.fromisoformat(config.index_start)
    horizon = config.censor_horizon_days

    subjects = []
    ground_truth = {}
    for i in range(config.n_subjects):
        subject_id = f"S{i:06d}"
        test_date = start + dt.timedelta(days=int(arrays.test_offsets[i]))
        events = []
        continuous = {}
        for j, spec in enumerate(specs):
            value = float(arrays.X[i, j])
            if spec.kind == "binary":
                if value == 1.0:
                    date = test_date - dt.timedelta(days=int(arrays.event_offsets[i, j]))
                    events.append(ClinicalEvent(feature_code(j), date, EventSource.HOSPITAL))
            else:
                continuous[spec.name] = value
        events.sort(key=lambda e: (e.date, e.code, e.source.value))

        died = bool(arrays.died[i])
        censor_date = test_date + dt.timedelta(days=horizon)
        death_date = test_date + dt.timedelta(days=int(arrays.survival_days[i])) if died else None
        subjects.append(
            SubjectRecord(
                subject_id=subject_id,
                age_years=float(arrays.ages[i]),
                sex=Sex.MALE if arrays.male[i] else Sex.FEMALE,
                continuous_baseline=continuous,
                categorical_baseline={},
                events=tuple(events),
                vitals=(),
                index_test_date=test_date,
                outcome=Outcome(died=died, death_date=death_date, censor_date=censor_date),
            )
        )
        ground_truth[subject_id] = float(arrays.linear_predictor[i])

    return subjects, ground_truth


def oracle_score(config: GeneratorConfig, subject: SubjectRecord) -> float:
    """
    True linear predictor of a generated subject, read back from its record.

    Args:
        config: Configuration the subject was generated under
        subject: Generated subject

    Returns:
        Sum of planted log-hazard ratios times the subject's feature values
    """
    specs = config.all_specs()
    index = {spec.name: j for j, spec in enumerate(specs)}
    codes = {event.code for event in subject.events}

    total = 0.0
    for effect in config.planted_effects:
        j = index.get(effect.feature_name)
        if j is None:
            raise ConfigurationError(f"unknown feature '{effect.feature_name}'")
        spec = specs[j]
        if spec.kind == "binary":
            value = 1.0 if feature_code(j) in codes else 0.0
        else:
            value = subject.continuous_baseline.get(spec.name)
            if value is None:
                raise ConfigurationError(f"subject '{subject.subject_id}' has no value for '{spec.name}'")
        total = total + effect.log_hazard_ratio * value
    return total


def write_cohort(
    subjects: Sequence[SubjectRecord], ground_truth: Dict[str, float], config: GeneratorConfig, out_dir: Union[str, Path]
) -> Dict[str, Path]:
    """
    Write subjects.jsonl, ground_truth.csv and catalog.csv into out_dir.

    Returns:
        Mapping of artifact name to written path
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "subjects": out_dir / "subjects.jsonl",
        "ground_truth": out_dir / "ground_truth.csv",
        "catalog": out_dir / "catalog.csv",
    }
    write_subjects(subjects, paths["subjects"])
    pd.DataFrame(
        {"subject_id": list(ground_truth.keys()), "linear_predictor": list(ground_truth.values())}
    ).to_csv(paths["ground_truth"], index=False, lineterminator="\n", float_format="%.17g")
    synthetic_catalog(config).to_csv(paths["catalog"])
    logger.info(f"✅ Wrote {len(subjects)} synthetic subjects to {out_dir}")
    return paths
