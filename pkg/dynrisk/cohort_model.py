#!/usr/bin/env python3
"""
Cohort data model and ingestion pipeline.
Sanitises subject records, applies the clinical time windows, and encodes the cohort
into a dense feature matrix with labels, survival times and column statistics.
"""

import datetime as dt
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .exceptions import CatalogError, CohortError, CohortParseError, DuplicateSubjectError

logger = logging.getLogger(__name__)

AGE_RANGE = (18.0, 120.0)

# Redacted / non-answers become missing values
REDACTED_ANSWERS = {"", "prefer not to answer", "do not know", "redacted"}
REDACTED_SENTINELS = {-1.0, -3.0}

LABEL_COLUMN = "__label"
SURVIVAL_COLUMN = "__survival_days"
SUBJECT_COLUMN = "__subject_id"
COLUMNS_SUFFIX = ".columns.json"


class Sex(Enum):
    MALE = "male"
    FEMALE = "female"


class EventSource(Enum):
    HOSPITAL = "hospital"
    PRIMARY_CARE = "primary_care"
    SELF_REPORT = "self_report"


class VitalKind(Enum):
    SYSTOLIC_BP = "systolic_bp"
    DIASTOLIC_BP = "diastolic_bp"
    HEART_RATE = "heart_rate"
    BODY_TEMPERATURE = "body_temperature"
    OXYGEN_SATURATION = "oxygen_saturation"
    RESPIRATORY_RATE = "respiratory_rate"


class FeatureClass(Enum):
    ACUTE = "acute"
    CANCER = "cancer"
    CHRONIC = "chronic"
    SYMPTOM_OR_VITAL = "symptom_or_vital"
    BASELINE = "baseline"


class Encoding(Enum):
    BINARY_PRESENCE = "binary_presence"
    CONTINUOUS = "continuous"
    ONE_HOT_CATEGORY = "one_hot_category"


class Normalization(Enum):
    NONE = "none"
    ZSCORE = "zscore"


# ---------------------------------------------------------------------------
# Subject records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClinicalEvent:
    code: str
    date: dt.date
    source: EventSource


@dataclass(frozen=True)
class VitalObservation:
    kind: VitalKind
    value: float
    date: dt.date


@dataclass(frozen=True)
class Outcome:
    died: bool
    death_date: Optional[dt.date]
    censor_date: dt.date


@dataclass(frozen=True)
class SubjectRecord:
    """One participant with a positive index test."""

    subject_id: str
    age_years: float
    sex: Sex
    continuous_baseline: Mapping[str, Optional[float]]
    categorical_baseline: Mapping[str, Optional[str]]
    events: Tuple[ClinicalEvent, ...]
    vitals: Tuple[VitalObservation, ...]
    index_test_date: dt.date
    outcome: Outcome


@dataclass(frozen=True)
class IngestResult:
    subjects: Tuple[SubjectRecord, ...]
    counts: Dict[str, int]


INGEST_COUNTERS = (
    "lines",
    "subjects",
    "missing_index_test_date",
    "missing_outcome",
    "age_out_of_range",
    "implausible_vital",
    "unknown_vital_kind",
    "empty_code",
    "event_after_records_end",
    "redacted_categorical",
    "redacted_continuous",
    "unknown_fields",
)

_SUBJECT_FIELDS = {
    "subject_id",
    "age_years",
    "sex",
    "continuous_baseline",
    "categorical_baseline",
    "events",
    "vitals",
    "index_test_date",
    "outcome",
}


def _parse_date(value, what: str, line_number: int) -> dt.date:
    if not isinstance(value, str):
        raise CohortParseError(f"{what} must be an ISO date string", line_number)
    try:
        return dt.date.fromisoformat(value)
    except ValueError as e:
        raise CohortParseError(f"{what}: {e}", line_number) from e


def _parse_number(value, what: str, line_number: int) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CohortParseError(f"{what} must be a number", line_number)
    return float(value)


def normalize_code(code: str) -> str:
    """Strip and upper-case a diagnosis/treatment code."""
    return code.strip().upper()


def _parse_outcome(raw, line_number: int) -> Outcome:
    if not isinstance(raw, dict):
        raise CohortParseError("outcome must be an object", line_number)
    died = raw.get("died")
    if not isinstance(died, bool):
        raise CohortParseError("outcome.died must be true or false", line_number)
    death_raw = raw.get("death_date")
    death_date = _parse_date(death_raw, "outcome.death_date", line_number) if death_raw is not None else None
    if died != (death_date is not None):
        raise CohortParseError("outcome.death_date must be present exactly when died is true", line_number)
    censor_date = _parse_date(raw.get("censor_date"), "outcome.censor_date", line_number)
    return Outcome(died=died, death_date=death_date, censor_date=censor_date)


def _parse_subject(
    obj: Dict, line_number: int, plausibility: Mapping[str, Sequence[float]], counts: Counter
) -> Optional[SubjectRecord]:
    unknown = set(obj) - _SUBJECT_FIELDS
    if unknown:
        counts["unknown_fields"] += len(unknown)
        logger.debug(f"line {line_number}: ignoring unknown fields {sorted(unknown)}")

    if obj.get("index_test_date") is None:
        counts["missing_index_test_date"] += 1
        return None
    if obj.get("outcome") is None:
        counts["missing_outcome"] += 1
        return None

    subject_id = obj.get("subject_id")
    test_date = _parse_date(obj["index_test_date"], "index_test_date", line_number)
    outcome = _parse_outcome(obj["outcome"], line_number)

    age = _parse_number(obj.get("age_years"), "age_years", line_number)
    if not AGE_RANGE[0] <= age <= AGE_RANGE[1]:
        counts["age_out_of_range"] += 1
        logger.debug(f"line {line_number}: dropping subject {subject_id}, age {age}")
        return None

    try:
        sex = Sex(str(obj.get("sex", "")).strip().lower())
    except ValueError as e:
        raise CohortParseError(f"sex must be 'male' or 'female', got {obj.get('sex')!r}", line_number) from e

    continuous = {}
    for name, value in (obj.get("continuous_baseline") or {}).items():
        if value is None:
            continuous[name] = None
            continue
        number = _parse_number(value, f"continuous_baseline.{name}", line_number)
        if number in REDACTED_SENTINELS:
            counts["redacted_continuous"] += 1
            number = None
        continuous[name] = number

    categorical = {}
    for name, value in (obj.get("categorical_baseline") or {}).items():
        if value is not None and str(value).strip().lower() in REDACTED_ANSWERS:
            counts["redacted_categorical"] += 1
            value = None
        categorical[name] = None if value is None else str(value).strip()

    events = []
    for i, raw in enumerate(obj.get("events") or []):
        if not isinstance(raw, dict):
            raise CohortParseError(f"events[{i}] must be an object", line_number)
        code = normalize_code(str(raw.get("code") or ""))
        if not code:
            counts["empty_code"] += 1
            continue
        date = _parse_date(raw.get("date"), f"events[{i}].date", line_number)
        if date > outcome.censor_date:
            counts["event_after_records_end"] += 1
            continue
        try:
            source = EventSource(raw.get("source", EventSource.HOSPITAL.value))
        except ValueError as e:
            raise CohortParseError(f"events[{i}].source: unknown source {raw.get('source')!r}", line_number) from e
        events.append(ClinicalEvent(code=code, date=date, source=source))

    vitals = []
    for i, raw in enumerate(obj.get("vitals") or []):
        if not isinstance(raw, dict):
            raise CohortParseError(f"vitals[{i}] must be an object", line_number)
        try:
            kind = VitalKind(raw.get("kind"))
        except ValueError:
            counts["unknown_vital_kind"] += 1
            continue
        value = _parse_number(raw.get("value"), f"vitals[{i}].value", line_number)
        date = _parse_date(raw.get("date"), f"vitals[{i}].date", line_number)
        low, high = plausibility.get(kind.value, (-math.inf, math.inf))
        if not low <= value <= high:
            counts["implausible_vital"] += 1
            logger.debug(f"line {line_number}: dropping implausible {kind.value}={value}")
            continue
        vitals.append(VitalObservation(kind=kind, value=value, date=date))

    events.sort(key=lambda e: (e.date, e.code, e.source.value))
    vitals.sort(key=lambda v: (v.date, v.kind.value, v.value))

    return SubjectRecord(
        subject_id=subject_id,
        age_years=age,
        sex=sex,
        continuous_baseline=continuous,
        categorical_baseline=categorical,
        events=tuple(events),
        vitals=tuple(vitals),
        index_test_date=test_date,
        outcome=outcome,
    )


def ingest_cohort(
    source: Iterable[str], plausibility: Optional[Mapping[str, Sequence[float]]] = None
) -> IngestResult:
    """
    Parse and sanitise line-delimited subject records.

    Args:
        source: Iterable of JSON lines, one subject per line
        plausibility: Per vital kind [low, high] range; out-of-range observations are dropped

    Returns:
        IngestResult with date-sorted subjects and drop counters
    """
    plausibility = plausibility or {}
    counts = Counter({name: 0 for name in INGEST_COUNTERS})
    subjects = []
    seen = set()

    for line_number, line in enumerate(source, start=1):
        if not line.strip():
            continue
        counts["lines"] += 1
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise CohortParseError(f"invalid JSON ({e.msg})", line_number) from e
        if not isinstance(obj, dict):
            raise CohortParseError("subject record must be a JSON object", line_number)

        subject_id = obj.get("subject_id")
        if not isinstance(subject_id, str) or not subject_id:
            raise CohortParseError("subject_id must be a non-empty string", line_number)
        if subject_id in seen:
            raise DuplicateSubjectError(subject_id, line_number)
        seen.add(subject_id)

        subject = _parse_subject(obj, line_number, plausibility, counts)
        if subject is not None:
            subjects.append(subject)

    counts["subjects"] = len(subjects)
    dropped = {k: v for k, v in counts.items() if v and k not in ("lines", "subjects")}
    logger.info(f"Ingested {len(subjects)} subjects from {counts['lines']} lines; dropped/redacted: {dropped or 'none'}")
    return IngestResult(subjects=tuple(subjects), counts=dict(counts))


def read_subjects(path: Union[str, Path], plausibility: Optional[Mapping[str, Sequence[float]]] = None) -> IngestResult:
    """Ingest a subject file from disk."""
    with open(path, "r", encoding="utf-8") as f:
        return ingest_cohort(f, plausibility)


def subject_to_dict(subject: SubjectRecord) -> Dict:
    """Serialise a subject in the subject file format."""
    return {
        "subject_id": subject.subject_id,
        "age_years": subject.age_years,
        "sex": subject.sex.value,
        "continuous_baseline": dict(subject.continuous_baseline),
        "categorical_baseline": dict(subject.categorical_baseline),
        "events": [{"code": e.code, "date": e.date.isoformat(), "source": e.source.value} for e in subject.events],
        "vitals": [{"kind": v.kind.value, "value": v.value, "date": v.date.isoformat()} for v in subject.vitals],
        "index_test_date": subject.index_test_date.isoformat(),
        "outcome": {
            "died": subject.outcome.died,
            "death_date": subject.outcome.death_date.isoformat() if subject.outcome.death_date else None,
            "censor_date": subject.outcome.censor_date.isoformat(),
        },
    }


def write_subjects(subjects: Iterable[SubjectRecord], path: Union[str, Path]) -> None:
    """Write subjects as JSON lines with stable key order."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for subject in subjects:
            f.write(json.dumps(subject_to_dict(subject), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Time windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeWindowRule:
    """
    Windows in days before the index test (negative = after the test).
    Event classes use half-open [low, high) windows; the symptom/vital window is closed.
    """

    feature_class: FeatureClass
    windows: Tuple[Tuple[float, float], ...]

    def window_index(self, days_before: int, include_post_test: bool = True) -> Optional[int]:
        if self.feature_class is FeatureClass.SYMPTOM_OR_VITAL:
            low, high = self.windows[0]
            if not include_post_test:
                low = 0
            return 0 if low <= days_before <= high else None
        for index, (low, high) in enumerate(self.windows):
            if low <= days_before < high:
                return index
        return None


TIME_RULES = {
    FeatureClass.ACUTE: TimeWindowRule(FeatureClass.ACUTE, ((7, 30), (30, 365), (365, math.inf))),
    FeatureClass.CANCER: TimeWindowRule(FeatureClass.CANCER, ((7, 365), (365, 1825), (1825, math.inf))),
    FeatureClass.CHRONIC: TimeWindowRule(FeatureClass.CHRONIC, ((7, math.inf),)),
    FeatureClass.SYMPTOM_OR_VITAL: TimeWindowRule(FeatureClass.SYMPTOM_OR_VITAL, ((-14, 14),)),
}

WINDOW_LABELS = {
    FeatureClass.ACUTE: ("<1 month", "1-12 months", ">12 months"),
    FeatureClass.CANCER: ("<12 months", "12-60 months", ">60 months"),
    FeatureClass.CHRONIC: (">1 week",),
    FeatureClass.SYMPTOM_OR_VITAL: ("+/-2 weeks",),
}


def is_multi_window(feature_class: FeatureClass) -> bool:
    return feature_class in TIME_RULES and len(TIME_RULES[feature_class].windows) > 1


# ---------------------------------------------------------------------------
# Feature catalog
# ---------------------------------------------------------------------------

MATCHER_KINDS = ("code", "vital", "baseline", "category", "demographic")


@dataclass(frozen=True)
class Matcher:
    """
    Parsed matcher text:
      code:J96|J80            event code prefixes
      vital:heart_rate        vital kind
      baseline:bmi            continuous baseline field
      category:smoking=A|B    categorical baseline field with optional declared levels
      demographic:age|sex     demographics
    """

    kind: str
    keys: Tuple[str, ...]
    levels: Tuple[str, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "Matcher":
        kind, sep, rest = text.partition(":")
        kind = kind.strip().lower()
        if not sep or kind not in MATCHER_KINDS or not rest.strip():
            raise CatalogError(f"invalid matcher '{text}'")
        levels = ()
        if kind == "category" and "=" in rest:
            rest, _, level_text = rest.partition("=")
            levels = tuple(level.strip() for level in level_text.split("|") if level.strip())
        keys = tuple(key.strip() for key in rest.split("|") if key.strip())
        if kind == "code":
            keys = tuple(normalize_code(key) for key in keys)
        if not keys:
            raise CatalogError(f"invalid matcher '{text}'")
        return cls(kind=kind, keys=keys, levels=levels)

    def to_text(self) -> str:
        text = f"{self.kind}:{'|'.join(self.keys)}"
        if self.levels:
            text += "=" + "|".join(self.levels)
        return text


@dataclass(frozen=True)
class CatalogEntry:
    feature_name: str
    matcher: Matcher
    feature_class: FeatureClass
    group_label: Optional[str] = None
    encoding: Encoding = Encoding.BINARY_PRESENCE
    windows: Optional[Tuple[int, ...]] = None

    def active_windows(self) -> Tuple[int, ...]:
        if self.feature_class not in TIME_RULES:
            return ()
        if self.windows is not None:
            return self.windows
        return tuple(range(len(TIME_RULES[self.feature_class].windows)))


def _validate_entry(entry: CatalogEntry) -> None:
    name = entry.feature_name
    if not name or "@" in name or "=" in name:
        raise CatalogError(f"feature_name '{name}' must be non-empty and free of '@' and '='")
    kind = entry.matcher.kind
    fc = entry.feature_class
    if kind == "code":
        if entry.encoding is not Encoding.BINARY_PRESENCE or fc is FeatureClass.BASELINE:
            raise CatalogError(f"{name}: code matchers need a time-windowed class and binary_presence")
    elif kind == "vital":
        if fc is not FeatureClass.SYMPTOM_OR_VITAL or entry.encoding is not Encoding.CONTINUOUS:
            raise CatalogError(f"{name}: vital matchers need symptom_or_vital and continuous")
        for key in entry.matcher.keys:
            try:
                VitalKind(key)
            except ValueError as e:
                raise CatalogError(f"{name}: unknown vital kind '{key}'") from e
    elif kind == "baseline":
        if fc is not FeatureClass.BASELINE or entry.encoding is not Encoding.CONTINUOUS:
            raise CatalogError(f"{name}: baseline matchers need baseline and continuous")
    elif kind == "category":
        if fc is not FeatureClass.BASELINE or entry.encoding is not Encoding.ONE_HOT_CATEGORY:
            raise CatalogError(f"{name}: category matchers need baseline and one_hot_category")
    elif kind == "demographic":
        key = entry.matcher.keys[0]
        expected = {"age": Encoding.CONTINUOUS, "sex": Encoding.BINARY_PRESENCE}.get(key)
        if expected is None or entry.encoding is not expected or fc is not FeatureClass.BASELINE:
            raise CatalogError(f"{name}: demographic matcher must be age (continuous) or sex (binary_presence)")
    if entry.windows is not None:
        if kind != "code":
            raise CatalogError(f"{name}: windows only apply to code matchers")
        available = len(TIME_RULES[fc].windows)
        if not entry.windows or any(w < 0 or w >= available for w in entry.windows):
            raise CatalogError(f"{name}: windows {entry.windows} outside 0..{available - 1}")


@dataclass(frozen=True)
class FeatureCatalog:
    """Declarative mapping from codes and measurements to named features."""

    entries: Tuple[CatalogEntry, ...]

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            _validate_entry(entry)
            if entry.feature_name in seen:
                raise CatalogError(f"duplicate feature_name '{entry.feature_name}'")
            seen.add(entry.feature_name)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> List[str]:
        return [entry.feature_name for entry in self.entries]

    def entry(self, feature_name: str) -> CatalogEntry:
        for entry in self.entries:
            if entry.feature_name == feature_name:
                return entry
        raise CatalogError(f"feature '{feature_name}' not in catalog")

    def match_code(self, code: str) -> Optional[CatalogEntry]:
        """First entry (declaration order) whose prefix set matches the code."""
        for entry in self.entries:
            if entry.matcher.kind == "code" and code.startswith(entry.matcher.keys):
                return entry
        return None

    def match_vital(self, kind: VitalKind) -> Optional[CatalogEntry]:
        for entry in self.entries:
            if entry.matcher.kind == "vital" and kind.value in entry.matcher.keys:
                return entry
        return None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "feature_name": e.feature_name,
                    "matcher": e.matcher.to_text(),
                    "feature_class": e.feature_class.value,
                    "group_label": e.group_label or "",
                    "encoding": e.encoding.value,
                    "windows": "" if e.windows is None else "|".join(str(w) for w in e.windows),
                }
                for e in self.entries
            ],
            columns=["feature_name", "matcher", "feature_class", "group_label", "encoding", "windows"],
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "FeatureCatalog":
        required = {"feature_name", "matcher", "feature_class", "encoding"}
        missing = required - set(frame.columns)
        if missing:
            raise CatalogError(f"catalog is missing columns {sorted(missing)}")
        entries = []
        for row_number, row in enumerate(frame.to_dict("records"), start=2):
            try:
                feature_class = FeatureClass(str(row["feature_class"]).strip())
                encoding = Encoding(str(row["encoding"]).strip())
            except ValueError as e:
                raise CatalogError(f"catalog row {row_number}: {e}") from e
            windows_text = str(row.get("windows") or "").strip()
            windows = tuple(int(w) for w in windows_text.split("|")) if windows_text else None
            entries.append(
                CatalogEntry(
                    feature_name=str(row["feature_name"]).strip(),
                    matcher=Matcher.parse(str(row["matcher"])),
                    feature_class=feature_class,
                    group_label=str(row.get("group_label") or "").strip() or None,
                    encoding=encoding,
                    windows=windows,
                )
            )
        return cls(entries=tuple(entries))

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "FeatureCatalog":
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        return cls.from_frame(frame)


def default_baseline_catalog(subjects: Sequence[SubjectRecord]) -> FeatureCatalog:
    """Catalog of demographics plus every baseline field present in the subjects."""
    continuous = sorted({name for s in subjects for name in s.continuous_baseline})
    categorical = sorted({name for s in subjects for name in s.categorical_baseline})
    entries = [
        CatalogEntry("age", Matcher("demographic", ("age",)), FeatureClass.BASELINE, None, Encoding.CONTINUOUS),
        CatalogEntry("sex_male", Matcher("demographic", ("sex",)), FeatureClass.BASELINE, None, Encoding.BINARY_PRESENCE),
    ]
    entries += [
        CatalogEntry(name, Matcher("baseline", (name,)), FeatureClass.BASELINE, None, Encoding.CONTINUOUS)
        for name in continuous
    ]
    entries += [
        CatalogEntry(name, Matcher("category", (name,)), FeatureClass.BASELINE, None, Encoding.ONE_HOT_CATEGORY)
        for name in categorical
    ]
    return FeatureCatalog(tuple(entries))


class WindowAssignment(NamedTuple):
    feature_name: str
    window_index: Optional[int]
    value: float
    offset_days: int  # days before the index test; negative after it


def apply_time_filter(
    subject: SubjectRecord, catalog: FeatureCatalog, include_post_test_symptoms: bool = True
) -> List[WindowAssignment]:
    """
    Assign each catalogued event and vital to its class window.

    Args:
        subject: Ingested subject
        catalog: Feature catalog
        include_post_test_symptoms: Accept symptoms/vitals up to 14 days after the test

    Returns:
        One WindowAssignment per matched event/vital; excluded items have window_index None
    """
    assignments = []
    test_date = subject.index_test_date

    for event in subject.events:
        entry = catalog.match_code(event.code)
        if entry is None:
            continue
        days_before = (test_date - event.date).days
        window = TIME_RULES[entry.feature_class].window_index(days_before, include_post_test_symptoms)
        assignments.append(WindowAssignment(entry.feature_name, window, 1.0, days_before))

    rule = TIME_RULES[FeatureClass.SYMPTOM_OR_VITAL]
    for vital in subject.vitals:
        entry = catalog.match_vital(vital.kind)
        if entry is None:
            continue
        days_before = (test_date - vital.date).days
        window = rule.window_index(days_before, include_post_test_symptoms)
        assignments.append(WindowAssignment(entry.feature_name, window, vital.value, days_before))

    return assignments


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

KIND_BINARY = "binary"
KIND_CONTINUOUS = "continuous"
KIND_ONE_HOT = "one_hot"


@dataclass(frozen=True)
class ColumnStats:
    mean: float
    std_dev: Optional[float]
    observed_count: int
    kind: str
    scaled: bool = False


@dataclass(frozen=True)
class _RawTable:
    names: Tuple[str, ...]
    kinds: Tuple[str, ...]
    bases: Tuple[str, ...]  # catalog feature each column came from
    raw: np.ndarray


def _category_levels(entry: CatalogEntry, subjects: Sequence[SubjectRecord]) -> Tuple[str, ...]:
    if entry.matcher.levels:
        return entry.matcher.levels
    key = entry.matcher.keys[0]
    return tuple(sorted({s.categorical_baseline.get(key) for s in subjects} - {None}))


def _build_raw(
    subjects: Sequence[SubjectRecord], catalog: FeatureCatalog, include_post_test_symptoms: bool
) -> _RawTable:
    names, kinds, bases = [], [], []
    for entry in catalog.entries:
        kind = entry.matcher.kind
        if kind == "code":
            if is_multi_window(entry.feature_class):
                for w in entry.active_windows():
                    names.append(f"{entry.feature_name}@{w}")
                    kinds.append(KIND_BINARY)
                    bases.append(entry.feature_name)
            else:
                names.append(entry.feature_name)
                kinds.append(KIND_BINARY)
                bases.append(entry.feature_name)
        elif kind == "category":
            for level in _category_levels(entry, subjects):
                names.append(f"{entry.feature_name}={level}")
                kinds.append(KIND_ONE_HOT)
                bases.append(entry.feature_name)
        elif kind == "demographic" and entry.matcher.keys[0] == "sex":
            names.append(entry.feature_name)
            kinds.append(KIND_BINARY)
            bases.append(entry.feature_name)
        else:
            names.append(entry.feature_name)
            kinds.append(KIND_CONTINUOUS)
            bases.append(entry.feature_name)

    index = {name: i for i, name in enumerate(names)}
    by_name = {entry.feature_name: entry for entry in catalog.entries}
    raw = np.zeros((len(subjects), len(names)), dtype=float)
    for j, kind in enumerate(kinds):
        if kind == KIND_CONTINUOUS:
            raw[:, j] = np.nan

    for i, subject in enumerate(subjects):
        # Most recent qualifying event per feature; nearest vital per feature
        closest_event: Dict[str, Tuple[int, int]] = {}
        nearest_vital: Dict[str, Tuple[Tuple[int, int], float]] = {}
        for item in apply_time_filter(subject, catalog, include_post_test_symptoms):
            if item.window_index is None:
                continue
            entry = by_name[item.feature_name]
            if entry.matcher.kind == "vital":
                key = (abs(item.offset_days), -item.offset_days)
                if item.feature_name not in nearest_vital or key < nearest_vital[item.feature_name][0]:
                    nearest_vital[item.feature_name] = (key, item.value)
            else:
                current = closest_event.get(item.feature_name)
                if current is None or item.offset_days < current[0]:
                    closest_event[item.feature_name] = (item.offset_days, item.window_index)

        for feature_name, (_, window) in closest_event.items():
            entry = by_name[feature_name]
            column = f"{feature_name}@{window}" if is_multi_window(entry.feature_class) else feature_name
            if column in index:
                raw[i, index[column]] = 1.0
        for feature_name, (_, value) in nearest_vital.items():
            raw[i, index[feature_name]] = value

        for entry in catalog.entries:
            kind = entry.matcher.kind
            key = entry.matcher.keys[0]
            if kind == "demographic":
                if key == "age":
                    raw[i, index[entry.feature_name]] = subject.age_years
                else:
                    raw[i, index[entry.feature_name]] = 1.0 if subject.sex is Sex.MALE else 0.0
            elif kind == "baseline":
                value = subject.continuous_baseline.get(key)
                if value is not None:
                    raw[i, index[entry.feature_name]] = value
            elif kind == "category":
                value = subject.categorical_baseline.get(key)
                if value is None:
                    value = "Unknown"
                column = f"{entry.feature_name}={value}"
                if column in index:
                    raw[i, index[column]] = 1.0

    return _RawTable(tuple(names), tuple(kinds), tuple(bases), raw)


def _survival_days(subject: SubjectRecord) -> int:
    outcome = subject.outcome
    if outcome.died:
        days = (outcome.death_date - subject.index_test_date).days
        if days < 0:
            raise CohortError(f"subject '{subject.subject_id}' died before the index test date")
        return days
    days = (outcome.censor_date - subject.index_test_date).days
    if days <= 0:
        raise CohortError(f"subject '{subject.subject_id}' censored on or before the index test date")
    return days


def _sample_sd(values: np.ndarray) -> Optional[float]:
    if values.size < 2:
        return None
    return float(np.std(values, ddof=1))


def _column_stats(
    raw: np.ndarray, kinds: Sequence[str], names: Sequence[str], reference_means: Optional[Mapping[str, float]] = None
) -> List[Optional[ColumnStats]]:
    stats = []
    for j, kind in enumerate(kinds):
        column = raw[:, j]
        observed = column[~np.isnan(column)]
        if observed.size == 0:
            stats.append(None)
            continue
        mean = float(observed.mean())
        if reference_means and names[j] in reference_means:
            mean = float(reference_means[names[j]])
        stats.append(ColumnStats(mean=mean, std_dev=_sample_sd(observed), observed_count=int(observed.size), kind=kind))
    return stats


def _impute_and_scale(
    raw: np.ndarray, stats: Sequence[ColumnStats], normalization: Normalization
) -> Tuple[np.ndarray, List[ColumnStats]]:
    matrix = raw.copy()
    final_stats = []
    for j, column_stats in enumerate(stats):
        column = matrix[:, j]
        missing = np.isnan(column)
        if missing.any():
            column[missing] = column_stats.mean
        scaled = False
        if normalization is Normalization.ZSCORE and column_stats.kind == KIND_CONTINUOUS:
            sd = column_stats.std_dev
            if sd is not None and sd > 0:
                column[:] = (column - column_stats.mean) / sd
                scaled = True
        final_stats.append(
            ColumnStats(column_stats.mean, column_stats.std_dev, column_stats.observed_count, column_stats.kind, scaled)
        )
    return matrix, final_stats


@dataclass(frozen=True, eq=False)
class EncodedCohort:
    """Dense feature matrix with labels, survival times and column statistics."""

    feature_names: Tuple[str, ...]
    matrix: np.ndarray
    labels: np.ndarray
    survival_days: np.ndarray
    column_stats: Dict[str, ColumnStats]
    subject_ids: Tuple[str, ...]
    raw: np.ndarray
    kinds: Tuple[str, ...]
    bases: Tuple[str, ...]
    normalization: Normalization = Normalization.NONE
    warnings: Tuple[str, ...] = field(default=())

    @property
    def n_subjects(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_features(self) -> int:
        return self.matrix.shape[1]

    def column_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError as e:
            raise CatalogError(f"feature '{name}' not in encoded cohort") from e

    def resolve_columns(self, names: Iterable[str]) -> List[int]:
        """
        Column indices for exact column names or catalog feature names
        (a catalog feature name selects all its windows / levels).
        """
        selected = []
        for name in names:
            hits = [j for j, (col, base) in enumerate(zip(self.feature_names, self.bases)) if name in (col, base)]
            if not hits:
                raise CatalogError(f"feature '{name}' not in encoded cohort")
            selected.extend(hits)
        return sorted(set(selected))

    def select_features(self, columns: Sequence[int]) -> "EncodedCohort":
        columns = list(columns)
        names = tuple(self.feature_names[j] for j in columns)
        return EncodedCohort(
            feature_names=names,
            matrix=self.matrix[:, columns],
            labels=self.labels,
            survival_days=self.survival_days,
            column_stats={name: self.column_stats[name] for name in names},
            subject_ids=self.subject_ids,
            raw=self.raw[:, columns],
            kinds=tuple(self.kinds[j] for j in columns),
            bases=tuple(self.bases[j] for j in columns),
            normalization=self.normalization,
            warnings=self.warnings,
        )

    def drop_features(self, names: Iterable[str]) -> "EncodedCohort":
        """Remove columns by column or catalog feature name (sensitivity re-runs)."""
        dropped = set(self.resolve_columns(names))
        keep = [j for j in range(self.n_features) if j not in dropped]
        logger.info(f"Dropping {len(dropped)} column(s): {[self.feature_names[j] for j in sorted(dropped)]}")
        return self.select_features(keep)

    def imputed_values(self) -> np.ndarray:
        """Imputed but unscaled values."""
        means = np.array([self.column_stats[name].mean for name in self.feature_names])
        return np.where(np.isnan(self.raw), means[None, :], self.raw)

    def fold_matrix(self, train_index: np.ndarray) -> np.ndarray:
        """
        Full matrix re-imputed and re-standardised from training rows only.

        Args:
            train_index: Rows whose observed values define the statistics

        Returns:
            n_subjects x n_features matrix
        """
        train_raw = self.raw[train_index]
        fold_stats = _column_stats(train_raw, self.kinds, self.feature_names)
        fallback = [
            stats if stats is not None else self.column_stats[name]
            for stats, name in zip(fold_stats, self.feature_names)
        ]
        matrix, _ = _impute_and_scale(self.raw, fallback, self.normalization)
        return matrix

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.matrix, columns=list(self.feature_names))
        frame[LABEL_COLUMN] = self.labels.astype(int)
        frame[SURVIVAL_COLUMN] = self.survival_days.astype(int)
        frame[SUBJECT_COLUMN] = list(self.subject_ids)
        return frame

    def columns_document(self) -> Dict:
        """Per-column kind, statistics and pre-imputation values (missing cells as null)."""
        columns = []
        for j, name in enumerate(self.feature_names):
            stats = self.column_stats[name]
            columns.append(
                {
                    "name": name,
                    "kind": self.kinds[j],
                    "base": self.bases[j],
                    "mean": float(stats.mean),
                    "std_dev": None if stats.std_dev is None else float(stats.std_dev),
                    "observed_count": int(stats.observed_count),
                    "scaled": bool(stats.scaled),
                    "raw": [None if math.isnan(v) else float(v) for v in self.raw[:, j]],
                }
            )
        return {"normalization": self.normalization.value, "warnings": list(self.warnings), "columns": columns}

    def to_csv(self, path: Union[str, Path]) -> None:
        """Write the final matrix to ``path`` and the column document next to it."""
        self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
        with open(columns_sidecar(path), "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.columns_document(), f, indent=1)
            f.write("\n")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "EncodedCohort":
        """
        Load an exported cohort.

        With its column document present the cohort comes back whole: raw values
        with their missing cells, original-unit statistics and normalization.
        Without it the exported matrix is taken as final and doubles as the raw table.

        Raises:
            CohortError: Missing id columns, or a column document that does not match the CSV
        """
        frame = pd.read_csv(path, dtype={SUBJECT_COLUMN: str})
        for column in (LABEL_COLUMN, SURVIVAL_COLUMN, SUBJECT_COLUMN):
            if column not in frame.columns:
                raise CohortError(f"{path}: missing column {column}")
        names = tuple(c for c in frame.columns if c not in (LABEL_COLUMN, SURVIVAL_COLUMN, SUBJECT_COLUMN))
        matrix = frame[list(names)].to_numpy(dtype=float)
        common = dict(
            feature_names=names,
            matrix=matrix,
            labels=frame[LABEL_COLUMN].to_numpy(dtype=int),
            survival_days=frame[SURVIVAL_COLUMN].to_numpy(dtype=int),
            subject_ids=tuple(frame[SUBJECT_COLUMN].astype(str)),
        )

        sidecar = columns_sidecar(path)
        if sidecar.is_file():
            return cls(**common, **_columns_from_document(sidecar, names, matrix.shape[0]))

        logger.warning(f"No column document next to {path}; treating the exported matrix as raw values")
        kinds = tuple(
            KIND_ONE_HOT if "=" in name else KIND_BINARY if np.isin(matrix[:, j], (0.0, 1.0)).all() else KIND_CONTINUOUS
            for j, name in enumerate(names)
        )
        stats = _column_stats(matrix, kinds, names)
        return cls(
            **common,
            column_stats={name: s for name, s in zip(names, stats)},
            raw=matrix.copy(),
            kinds=kinds,
            bases=tuple(name.split("=")[0].split("@")[0] for name in names),
            normalization=Normalization.NONE,
        )


def columns_sidecar(path: Union[str, Path]) -> Path:
    """Column document path for an encoded CSV: ``encoded.csv`` -> ``encoded.columns.json``."""
    path = Path(path)
    return path.with_name(f"{path.stem}{COLUMNS_SUFFIX}")


def _columns_from_document(sidecar: Path, names: Tuple[str, ...], n_rows: int) -> Dict:
    with open(sidecar, encoding="utf-8") as f:
        document = json.load(f)
    entries = document.get("columns", [])
    if tuple(entry.get("name") for entry in entries) != names:
        raise CohortError(f"{sidecar}: columns do not match the encoded CSV")
    raw = np.empty((n_rows, len(entries)))
    for j, entry in enumerate(entries):
        values = entry["raw"]
        if len(values) != n_rows:
            raise CohortError(f"{sidecar}: column '{entry['name']}' has {len(values)} values, expected {n_rows}")
        raw[:, j] = [np.nan if v is None else v for v in values]
    return dict(
        column_stats={
            entry["name"]: ColumnStats(
                mean=float(entry["mean"]),
                std_dev=None if entry["std_dev"] is None else float(entry["std_dev"]),
                observed_count=int(entry["observed_count"]),
                kind=entry["kind"],
                scaled=bool(entry["scaled"]),
            )
            for entry in entries
        },
        raw=raw,
        kinds=tuple(entry["kind"] for entry in entries),
        bases=tuple(entry["base"] for entry in entries),
        normalization=Normalization(document.get("normalization", Normalization.NONE.value)),
        warnings=tuple(document.get("warnings", ())),
    )


def encode_cohort(
    subjects: Sequence[SubjectRecord],
    catalog: FeatureCatalog,
    normalization: Union[Normalization, str] = Normalization.ZSCORE,
    include_post_test_symptoms: bool = True,
    reference_means: Optional[Mapping[str, float]] = None,
) -> EncodedCohort:
    """
    Encode subjects into a dense, imputed feature matrix.

    Args:
        subjects: Ingested subjects
        catalog: Feature catalog
        normalization: none or zscore (continuous columns only)
        include_post_test_symptoms: Accept symptoms/vitals after the test date
        reference_means: Optional external imputation means by column name

    Returns:
        EncodedCohort
    """
    normalization = Normalization(normalization)
    if len(subjects) < 2:
        raise CohortError("encoding needs at least 2 subjects")
    labels = np.array([1 if s.outcome.died else 0 for s in subjects], dtype=int)
    if labels.min() == labels.max():
        raise CohortError("encoding needs at least one subject in each outcome class")
    survival = np.array([_survival_days(s) for s in subjects], dtype=int)

    table = _build_raw(subjects, catalog, include_post_test_symptoms)
    stats = _column_stats(table.raw, table.kinds, table.names, reference_means)

    warnings = []
    keep = []
    for j, column_stats in enumerate(stats):
        if column_stats is None:
            message = f"column '{table.names[j]}' dropped: no observed values"
            logger.warning(message)
            warnings.append(message)
        else:
            keep.append(j)

    raw = table.raw[:, keep]
    names = tuple(table.names[j] for j in keep)
    kinds = tuple(table.kinds[j] for j in keep)
    bases = tuple(table.bases[j] for j in keep)
    matrix, final_stats = _impute_and_scale(raw, [stats[j] for j in keep], normalization)

    if normalization is Normalization.ZSCORE:
        for name, column_stats in zip(names, final_stats):
            if column_stats.kind == KIND_CONTINUOUS and not column_stats.scaled:
                message = f"column '{name}' left unscaled: zero variance"
                logger.warning(message)
                warnings.append(message)

    logger.info(f"Encoded {len(subjects)} subjects x {len(names)} features ({int(labels.sum())} deaths)")
    return EncodedCohort(
        feature_names=names,
        matrix=matrix,
        labels=labels,
        survival_days=survival,
        column_stats=dict(zip(names, final_stats)),
        subject_ids=tuple(s.subject_id for s in subjects),
        raw=raw,
        kinds=kinds,
        bases=bases,
        normalization=normalization,
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# Descriptive statistics
# ---------------------------------------------------------------------------


def format_percent(count: int, total: int) -> str:
    """Within-row percentage, one decimal, trailing .0 dropped."""
    if total == 0:
        return "NA"
    text = f"{100.0 * count / total:.1f}"
    return text[:-2] if text.endswith(".0") else text


def _mean_sd(values: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
    if values.size == 0:
        return None, None
    return float(values.mean()), _sample_sd(values)


def _format_mean_sd(mean: Optional[float], sd: Optional[float]) -> str:
    if mean is None:
        return "NA"
    return f"{mean:.1f} ({'NA' if sd is None else f'{sd:.1f}'})"


def descriptive_stats(
    data: Union[EncodedCohort, Sequence[SubjectRecord]],
    catalog: Optional[FeatureCatalog] = None,
    include_post_test_symptoms: bool = True,
) -> pd.DataFrame:
    """
    Build descriptive characteristics split by outcome.

    Args:
        data: Encoded cohort (its raw values are used) or raw subjects
        catalog: Catalog for raw subjects; defaults to demographics + baseline fields

    Returns:
        DataFrame, one row per feature; count rows carry within-row percentages,
        continuous rows carry mean (SD) over observed values
    """
    if isinstance(data, EncodedCohort):
        names, kinds, raw, labels = data.feature_names, data.kinds, data.raw, data.labels
    else:
        subjects = list(data)
        catalog = catalog or default_baseline_catalog(subjects)
        table = _build_raw(subjects, catalog, include_post_test_symptoms)
        names, kinds, raw = table.names, table.kinds, table.raw
        labels = np.array([1 if s.outcome.died else 0 for s in subjects], dtype=int)

    died = labels == 1
    n_total = int(labels.size)
    n_died = int(died.sum())
    rows = [
        {
            "feature": "All participants",
            "kind": "count",
            "n": n_total,
            "n_survived": n_total - n_died,
            "n_died": n_died,
            "survived": f"{n_total - n_died} ({format_percent(n_total - n_died, n_total)})",
            "died": f"{n_died} ({format_percent(n_died, n_total)})",
        }
    ]

    for j, (name, kind) in enumerate(zip(names, kinds)):
        column = raw[:, j]
        if kind == KIND_CONTINUOUS:
            observed = ~np.isnan(column)
            mean, sd = _mean_sd(column[observed])
            mean_s, sd_s = _mean_sd(column[observed & ~died])
            mean_d, sd_d = _mean_sd(column[observed & died])
            rows.append(
                {
                    "feature": name,
                    "kind": kind,
                    "n": int(observed.sum()),
                    "n_survived": int((observed & ~died).sum()),
                    "n_died": int((observed & died).sum()),
                    "mean": mean,
                    "sd": sd,
                    "mean_survived": mean_s,
                    "sd_survived": sd_s,
                    "mean_died": mean_d,
                    "sd_died": sd_d,
                    "overall": _format_mean_sd(mean, sd),
                    "survived": _format_mean_sd(mean_s, sd_s),
                    "died": _format_mean_sd(mean_d, sd_d),
                }
            )
        else:
            present = column == 1.0
            n = int(present.sum())
            n_d = int((present & died).sum())
            rows.append(
                {
                    "feature": name,
                    "kind": kind,
                    "n": n,
                    "n_survived": n - n_d,
                    "n_died": n_d,
                    "survived": f"{n - n_d} ({format_percent(n - n_d, n)})",
                    "died": f"{n_d} ({format_percent(n_d, n)})",
                }
            )

    columns = [
        "feature", "kind", "n", "n_survived", "n_died", "overall", "survived", "died",
        "mean", "sd", "mean_survived", "sd_survived", "mean_died", "sd_died",
    ]
    return pd.DataFrame(rows).reindex(columns=columns)
