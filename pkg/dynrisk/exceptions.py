"""
Error hierarchy for dynrisk.
Library code raises these; only the command-line driver turns them into exit codes.
"""

from typing import Optional


class DynriskError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(DynriskError):
    """Invalid run, generator, review or catalog configuration."""


class CohortParseError(DynriskError):
    """A subject line could not be parsed."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DuplicateSubjectError(DynriskError):
    """The same subject_id appeared twice in one source."""

    def __init__(self, subject_id: str, line_number: int):
        super().__init__(f"line {line_number}: duplicate subject_id '{subject_id}'")
        self.subject_id = subject_id
        self.line_number = line_number


class CohortError(DynriskError):
    """The cohort violates an encoding precondition."""


class CatalogError(DynriskError):
    """A feature catalog is invalid or a feature cannot be resolved in it."""


class TrainingError(DynriskError):
    """A model could not be trained on the given rows."""


class DimensionError(DynriskError):
    """A feature vector does not match the model's dimension."""


class MetricDomainError(DynriskError, ValueError):
    """A metric was asked for outside its domain."""


class ConvergenceError(DynriskError):
    """The Cox fitter did not reach a usable optimum."""


class SeparationError(ConvergenceError):
    """A coefficient ran past the separation bound (monotone likelihood)."""

    def __init__(self, feature: str, beta: float):
        super().__init__(
            f"separation detected on covariate '{feature}' (|beta| = {abs(beta):.2f}); "
            "the covariate perfectly orders the events"
        )
        self.feature = feature
        self.beta = beta


class RankDeficiencyError(ConvergenceError):
    """The information matrix is numerically singular."""


class NotConvergedError(ConvergenceError):
    """A result was requested from a model that did not converge."""


class SkipIteration(DynriskError):
    """A LOO iteration cannot be trained because one class is empty."""


class LooAbortedError(DynriskError):
    """Too many LOO iterations failed."""


class LeakageError(DynriskError):
    """A held-out index reached a training set."""


class EquationError(DynriskError):
    """An external risk equation file is malformed."""

    def __init__(self, message: str, location: Optional[str] = None):
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location


class StratumError(DynriskError):
    """A subject matched no stratum of an external equation."""

    def __init__(self, subject_id: str, value: object):
        super().__init__(f"subject '{subject_id}' matches no stratum (stratifying value {value!r})")
        self.subject_id = subject_id
