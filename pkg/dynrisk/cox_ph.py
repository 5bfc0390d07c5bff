#!/usr/bin/env python3
"""
Cox proportional-hazards model
Newton-Raphson on the negative log partial likelihood with Efron or Breslow ties.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.stats import norm

from .exceptions import (
    ConfigurationError,
    DimensionError,
    MetricDomainError,
    NotConvergedError,
    RankDeficiencyError,
    SeparationError,
    TrainingError,
)

logger = logging.getLogger(__name__)

Z_95 = 1.959964


class TiesMethod(Enum):
    EFRON = "efron"
    BRESLOW = "breslow"


@dataclass(frozen=True)
class SurvivalSample:
    x: Tuple[float, ...]
    time_days: int
    event: bool


def stack_samples(samples: Sequence[SurvivalSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X, time, event) arrays from a sequence of samples."""
    X = np.array([s.x for s in samples], dtype=float).reshape(len(samples), -1)
    time = np.array([s.time_days for s in samples], dtype=float)
    event = np.array([s.event for s in samples], dtype=bool)
    return X, time, event


@dataclass(frozen=True)
class CoxOptions:
    ties_method: TiesMethod = TiesMethod.EFRON
    tol: float = 1e-8
    max_iter: int = 50
    max_halvings: int = 10
    separation_bound: float = 20.0

    @classmethod
    def from_config(cls, section: Dict) -> "CoxOptions":
        try:
            ties = TiesMethod(section.get("ties", "efron"))
        except ValueError as e:
            raise ConfigurationError(f"unknown ties method '{section.get('ties')}'") from e
        return cls(
            ties_method=ties,
            tol=float(section.get("tol", 1e-8)),
            max_iter=int(section.get("max_iter", 50)),
            max_halvings=int(section.get("max_halvings", 10)),
            separation_bound=float(section.get("separation_bound", 20.0)),
        )


def _check_survival(X: np.ndarray, time: np.ndarray, event: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[0] != len(time) or len(time) != len(event):
        raise DimensionError(f"inconsistent survival arrays: X {X.shape}, time {time.shape}, event {event.shape}")
    if np.any(time < 0):
        raise MetricDomainError("survival times must be non-negative")
    if np.any((time == 0) & ~event):
        raise MetricDomainError("a censored sample cannot have time 0")


def neg_log_partial_likelihood(
    beta: np.ndarray,
    X: np.ndarray,
    time: np.ndarray,
    event: np.ndarray,
    ties_method: Union[TiesMethod, str] = TiesMethod.EFRON,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Negative log partial likelihood with analytic gradient and Hessian.

    Args:
        beta: Coefficients (p,)
        X: Covariates (n, p)
        time: Survival or censoring times (n,)
        event: True where death was observed (n,)
        ties_method: efron or breslow

    Returns:
        (value, gradient, hessian) of the negative log partial likelihood
    """
    ties_method = TiesMethod(ties_method)
    beta = np.asarray(beta, dtype=float)
    X = np.asarray(X, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    _check_survival(X, time, event)
    if not event.any():
        raise MetricDomainError("partial likelihood needs at least one event")
    if not np.all(np.isfinite(beta)):
        raise MetricDomainError("beta must be finite")

    order = np.argsort(time, kind="stable")
    X, time, event = X[order], time[order], event[order]
    n, p = X.shape

    eta = X @ beta
    shift = eta.max()
    with np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore"):
        phi = np.exp(eta - shift)
        phi_x = phi[:, None] * X

        # Risk-set sums at each distinct event time
        event_times, deaths = np.unique(time[event], return_counts=True)
        starts = np.searchsorted(time, event_times, side="left")
        risk = np.cumsum(phi[::-1])[::-1][starts]
        risk_x = np.cumsum(phi_x[::-1], axis=0)[::-1][starts]

        group = np.searchsorted(event_times, time[event])
        tied = np.bincount(group, weights=phi[event], minlength=len(event_times))
        tied_x = np.zeros((len(event_times), p))
        np.add.at(tied_x, group, phi_x[event])

        # One slot per death; Efron subtracts l/d of the tied mass
        slot = np.repeat(np.arange(len(event_times)), deaths)
        offsets = np.concatenate(([0], np.cumsum(deaths)[:-1]))
        within = np.arange(len(slot)) - offsets[slot]
        if ties_method is TiesMethod.EFRON:
            frac = within / deaths[slot]
        else:
            frac = np.zeros(len(slot))

        denom = risk[slot] - frac * tied[slot]
        means = (risk_x[slot] - frac[:, None] * tied_x[slot]) / denom[:, None]

        loglik = eta[event].sum() - np.sum(np.log(denom) + shift)
        gradient = X[event].sum(axis=0) - means.sum(axis=0)

        inv = 1.0 / denom
        a = np.bincount(slot, weights=inv, minlength=len(event_times))
        b = np.bincount(slot, weights=frac * inv, minlength=len(event_times))
        reached = np.searchsorted(event_times, time, side="right") - 1
        cumulative_a = np.concatenate(([0.0], np.cumsum(a)))[reached + 1]
        weights = phi * cumulative_a
        own = np.searchsorted(event_times, time[event])
        weights[event] -= phi[event] * b[own]

        hessian = (X * weights[:, None]).T @ X - means.T @ means

    if not (np.isfinite(loglik) and np.all(np.isfinite(gradient)) and np.all(np.isfinite(hessian))):
        raise OverflowError("non-finite partial likelihood; covariates may separate the outcome")

    hessian = (hessian + hessian.T) / 2.0
    return float(-loglik), -gradient, hessian


@dataclass(frozen=True, eq=False)
class CoxModel:
    beta: np.ndarray
    covariance: np.ndarray
    n_iterations: int
    converged: bool
    log_partial_likelihood: float
    ties_method: TiesMethod
    feature_names: Tuple[str, ...]

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self) -> Dict:
        return {
            "feature_names": list(self.feature_names),
            "beta": self.beta.tolist(),
            "covariance": self.covariance.tolist(),
            "ties_method": self.ties_method.value,
            "n_iterations": self.n_iterations,
            "converged": self.converged,
            "log_partial_likelihood": self.log_partial_likelihood,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CoxModel":
        data = json.loads(text)
        p = len(data["beta"])
        return cls(
            beta=np.asarray(data["beta"], dtype=float),
            covariance=np.asarray(data["covariance"], dtype=float).reshape(p, p),
            n_iterations=int(data["n_iterations"]),
            converged=bool(data["converged"]),
            log_partial_likelihood=float(data["log_partial_likelihood"]),
            ties_method=TiesMethod(data["ties_method"]),
            feature_names=tuple(data["feature_names"]),
        )

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
        logger.info(f"✅ Cox model saved to: {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CoxModel":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


def _newton_step(hessian: np.ndarray, gradient: np.ndarray) -> Tuple[np.ndarray, Tuple]:
    diagonal = np.diag(hessian)
    try:
        factor = linalg.cho_factor(hessian)
    except linalg.LinAlgError as e:
        raise RankDeficiencyError("Hessian is not positive definite; covariates may be collinear or constant") from e
    pivots = np.diag(factor[0]) ** 2
    if np.any(pivots <= 1e-10 * max(diagonal.max(), 1.0)):
        raise RankDeficiencyError("Hessian is numerically singular; covariates may be collinear or constant")
    return linalg.cho_solve(factor, gradient), factor


def fit_cox(
    X: np.ndarray,
    time: np.ndarray,
    event: np.ndarray,
    feature_names: Optional[Sequence[str]] = None,
    options: Optional[CoxOptions] = None,
) -> CoxModel:
    """
    Fit a Cox model by damped Newton-Raphson from beta = 0.

    Args:
        X: Covariates (n, p)
        time: Survival or censoring days
        event: Death indicators
        feature_names: Column names used in errors and reports
        options: Ties method and iteration controls

    Returns:
        CoxModel with covariance = inverse Hessian at the optimum
    """
    options = options or CoxOptions()
    X = np.asarray(X, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    _check_survival(X, time, event)
    n, p = X.shape
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise DimensionError(f"{len(names)} feature names for {p} columns")
    if event.sum() < 2:
        raise TrainingError("Cox fit needs at least 2 events")
    if n <= p:
        logger.warning(f"Cox fit with n={n} <= p={p}; estimates will be unstable")
    if np.any((time == 0) & event):
        logger.warning(f"{int(np.sum((time == 0) & event))} death(s) on the index date (time 0)")

    def evaluate(beta):
        return neg_log_partial_likelihood(beta, X, time, event, options.ties_method)

    beta = np.zeros(p)
    value, gradient, hessian = evaluate(beta)
    iterations = 0
    while np.max(np.abs(gradient)) > options.tol and iterations < options.max_iter:
        step, _ = _newton_step(hessian, gradient)
        scale = 1.0
        accepted = None
        for _ in range(options.max_halvings + 1):
            candidate = beta - scale * step
            try:
                result = evaluate(candidate)
            except OverflowError:
                result = None
            if result is not None and result[0] <= value:
                accepted = (candidate, result)
                break
            scale /= 2.0
        if accepted is None:
            logger.warning(f"Step halving exhausted at iteration {iterations + 1}")
            break

        beta, (value, gradient, hessian) = accepted
        iterations += 1
        worst = int(np.argmax(np.abs(beta)))
        if abs(beta[worst]) > options.separation_bound:
            raise SeparationError(names[worst], float(beta[worst]))
        logger.debug(f"Newton iteration {iterations}: -logPL={value:.10g}, |grad|max={np.max(np.abs(gradient)):.3g}")

    converged = bool(np.max(np.abs(gradient)) <= options.tol)
    _, factor = _newton_step(hessian, gradient)
    covariance = linalg.cho_solve(factor, np.eye(p))
    covariance = (covariance + covariance.T) / 2.0

    if converged:
        logger.info(f"✅ Cox fit converged in {iterations} iteration(s), log PL = {-value:.6f}")
    else:
        logger.warning(f"Cox fit did not converge after {iterations} iteration(s)")

    return CoxModel(
        beta=beta,
        covariance=covariance,
        n_iterations=iterations,
        converged=converged,
        log_partial_likelihood=-value,
        ties_method=options.ties_method,
        feature_names=names,
    )


def _z_value(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ConfigurationError("level must be in (0, 1)")
    if level == 0.95:
        return Z_95
    return float(norm.ppf((1.0 + level) / 2.0))


@dataclass(frozen=True)
class HazardRatio:
    feature: str
    beta: float
    se: float
    hr: float
    ci_low: float
    ci_high: float


def hazard_ratios(model: CoxModel, level: float = 0.95) -> List[HazardRatio]:
    """
    Hazard ratios exp(beta) with Wald confidence intervals.

    Args:
        model: Converged Cox model
        level: Interval level

    Returns:
        One HazardRatio per feature, in model order
    """
    if not model.converged:
        raise NotConvergedError("hazard ratios need a converged model")
    z = _z_value(level)
    ratios = []
    for name, beta, se in zip(model.feature_names, model.beta, model.standard_errors):
        ratios.append(
            HazardRatio(
                feature=name,
                beta=float(beta),
                se=float(se),
                hr=float(np.exp(beta)),
                ci_low=float(np.exp(beta - z * se)),
                ci_high=float(np.exp(beta + z * se)),
            )
        )
    return ratios


def hazard_ratio_report(model: CoxModel, level: float = 0.95) -> pd.DataFrame:
    """HR table ordered by |log HR| descending, ties by feature name."""
    ratios = sorted(hazard_ratios(model, level), key=lambda r: (-abs(r.beta), r.feature))
    return pd.DataFrame(
        [(r.feature, r.hr, r.ci_low, r.ci_high, r.beta, r.se) for r in ratios],
        columns=["feature", "hr", "ci_low", "ci_high", "beta", "se"],
    )


def cox_risk_score(model: CoxModel, x: Sequence[float]) -> float:
    """Linear predictor beta . x; higher means higher mortality risk."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != len(model.beta):
        raise DimensionError(f"expected a vector of {len(model.beta)} features, got shape {x.shape}")
    return float(x @ model.beta)


def cox_risk_scores(model: CoxModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(model.beta):
        raise DimensionError(f"expected {len(model.beta)} features, got {X.shape[1]}")
    return X @ model.beta
