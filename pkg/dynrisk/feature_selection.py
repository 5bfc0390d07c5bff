#!/usr/bin/env python3
"""
Feature selection
Importance ranking from LOO runs, the reviewed exclusion/grouping pass, and catalog rebuilding.
"""

import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .cohort_model import CatalogEntry, Encoding, FeatureCatalog, Matcher
from .exceptions import CatalogError, ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

DEFAULT_SCREEN_TOP_K = 1000


class ExclusionReason(Enum):
    NOT_SELF_REPORTABLE = "not_self_reportable"
    CONFOUNDED_WITH_HIGHER_RANKED = "confounded_with_higher_ranked"
    DATABASE_BIAS = "database_bias"


@dataclass(frozen=True)
class RankedEntry:
    feature_name: str
    mean_importance: float
    rank: int


@dataclass(frozen=True)
class RankedFeatureList:
    entries: Tuple[RankedEntry, ...]
    degenerate: bool = False
    removed: FrozenSet[str] = frozenset()
    groups: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> List[str]:
        return [e.feature_name for e in self.entries]

    def importance(self, feature_name: str) -> float:
        for e in self.entries:
            if e.feature_name == feature_name:
                return e.mean_importance
        raise KeyError(feature_name)

    def to_frame(self, include_members: bool = False) -> pd.DataFrame:
        rows = [(e.rank, e.feature_name, e.mean_importance) for e in self.entries]
        frame = pd.DataFrame(rows, columns=["rank", "feature", "mean_importance"])
        if include_members:
            frame["members"] = ["|".join(self.groups.get(e.feature_name, ())) for e in self.entries]
        return frame

    def to_csv(self, path: Union[str, Path], include_members: bool = False) -> None:
        self.to_frame(include_members).to_csv(path, index=False, lineterminator="\n", float_format="%.17g")

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "RankedFeatureList":
        missing = {"feature", "mean_importance"} - set(frame.columns)
        if missing:
            raise ConfigurationError(f"ranking is missing columns {sorted(missing)}")
        ranking = rank_features(frame["feature"].astype(str).tolist(), frame["mean_importance"].to_numpy(dtype=float))
        groups = {}
        if "members" in frame.columns:
            for name, members in zip(frame["feature"].astype(str), frame["members"].fillna("").astype(str)):
                if members:
                    groups[name] = tuple(members.split("|"))
        return RankedFeatureList(ranking.entries, ranking.degenerate, frozenset(), groups)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "RankedFeatureList":
        return cls.from_frame(pd.read_csv(path, dtype={"feature": str, "members": str}, keep_default_na=False))


def rank_features(feature_names: Sequence[str], importances: Sequence[float]) -> RankedFeatureList:
    """Rank descending by importance; ties broken by feature name."""
    values = np.asarray(importances, dtype=float)
    if len(feature_names) != len(values):
        raise DimensionError(f"{len(feature_names)} names for {len(values)} importances")
    order = sorted(zip(feature_names, values.tolist()), key=lambda pair: (-pair[1], pair[0]))
    entries = tuple(RankedEntry(name, value, rank) for rank, (name, value) in enumerate(order, start=1))
    degenerate = len(values) > 0 and bool(np.all(values == values[0])) and (len(values) > 1 or values[0] == 0.0)
    if degenerate:
        logger.warning("All importances are equal; ranking falls back to feature-name order")
    return RankedFeatureList(entries, degenerate)


def aggregate_importance(
    per_iteration_importances: Sequence[Sequence[float]], feature_names: Sequence[str]
) -> RankedFeatureList:
    """
    Mean importance per feature across iterations, ranked descending.

    Args:
        per_iteration_importances: One importance vector per iteration
        feature_names: Names in vector order

    Returns:
        RankedFeatureList
    """
    if len(per_iteration_importances) == 0:
        raise DimensionError("need at least one importance vector")
    total = np.zeros(len(feature_names))
    for i, vector in enumerate(per_iteration_importances):
        vector = np.asarray(vector, dtype=float)
        if vector.shape != total.shape:
            raise DimensionError(f"iteration {i}: expected {total.shape[0]} importances, got {vector.shape}")
        total = total + vector
    return rank_features(feature_names, total / len(per_iteration_importances))


@dataclass(frozen=True)
class Exclusion:
    feature_name: str
    reason: ExclusionReason


@dataclass(frozen=True)
class Grouping:
    group_name: str
    members: Tuple[str, ...]


@dataclass(frozen=True)
class ReviewConfig:
    """
    Reviewed shortlist decisions, stored as JSON:
      {"screen_top_k": 1000,
       "exclusions": [{"feature": "...", "reason": "not_self_reportable"}],
       "groupings": [{"group": "...", "members": ["...", "..."]}]}
    """

    screen_top_k: int = DEFAULT_SCREEN_TOP_K
    exclusions: Tuple[Exclusion, ...] = ()
    groupings: Tuple[Grouping, ...] = ()

    def __post_init__(self):
        if self.screen_top_k < 1:
            raise ConfigurationError("screen_top_k must be at least 1")

    @classmethod
    def from_dict(cls, data: Dict) -> "ReviewConfig":
        unknown = set(data) - {"screen_top_k", "exclusions", "groupings"}
        if unknown:
            raise ConfigurationError(f"unknown review config keys {sorted(unknown)}")
        exclusions = []
        for i, item in enumerate(data.get("exclusions", [])):
            try:
                exclusions.append(Exclusion(str(item["feature"]), ExclusionReason(item["reason"])))
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigurationError(f"exclusions[{i}]: needs 'feature' and a valid 'reason' ({e})") from e
        groupings = []
        for i, item in enumerate(data.get("groupings", [])):
            try:
                members = tuple(str(m) for m in item["members"])
                group = str(item["group"])
            except (KeyError, TypeError) as e:
                raise ConfigurationError(f"groupings[{i}]: needs 'group' and 'members'") from e
            if not members or "@" in group or "=" in group:
                raise ConfigurationError(f"groupings[{i}]: invalid group '{group}'")
            groupings.append(Grouping(group, members))
        return cls(
            screen_top_k=int(data.get("screen_top_k", DEFAULT_SCREEN_TOP_K)),
            exclusions=tuple(exclusions),
            groupings=tuple(groupings),
        )

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "ReviewConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        return cls.from_dict(data)


@dataclass(frozen=True)
class AuditEntry:
    feature: str
    action: str  # excluded | grouped
    reason: str
    timestamp: str

    def to_line(self) -> str:
        return "\t".join((self.feature, self.action, self.reason, self.timestamp))


def _known_names(ranking: RankedFeatureList) -> set:
    known = set(ranking.names()) | set(ranking.removed)
    for members in ranking.groups.values():
        known.update(members)
    return known


def apply_review(
    ranking: RankedFeatureList, config: ReviewConfig, now: Optional[dt.datetime] = None
) -> Tuple[RankedFeatureList, List[AuditEntry]]:
    """
    Truncate to the screened top-k, remove exclusions, merge groupings.

    Args:
        ranking: Ranked features (or a shortlist from an earlier pass)
        config: Review decisions
        now: Audit timestamp, defaults to the current UTC time

    Returns:
        (shortlist, audit entries), one audit entry per applied exclusion or grouping
    """
    known = _known_names(ranking)
    for exclusion in config.exclusions:
        if exclusion.feature_name not in known:
            raise ConfigurationError(f"excluded feature '{exclusion.feature_name}' is not in the ranking")
    for grouping in config.groupings:
        for member in grouping.members:
            if member not in known:
                raise ConfigurationError(f"group '{grouping.group_name}' member '{member}' is not in the ranking")

    timestamp = (now or dt.datetime.now(dt.timezone.utc)).isoformat(timespec="seconds")
    audit = []
    importances = {e.feature_name: e.mean_importance for e in ranking.entries[: config.screen_top_k]}
    removed = set(ranking.removed)
    groups = dict(ranking.groups)

    for exclusion in config.exclusions:
        if exclusion.feature_name in importances:
            del importances[exclusion.feature_name]
            removed.add(exclusion.feature_name)
            audit.append(AuditEntry(exclusion.feature_name, "excluded", exclusion.reason.value, timestamp))

    for grouping in config.groupings:
        present = [m for m in grouping.members if m in importances]
        if not present:
            continue
        total = importances.get(grouping.group_name, 0.0)
        for member in present:
            total += importances.pop(member)
        importances[grouping.group_name] = total
        groups[grouping.group_name] = tuple(dict.fromkeys(groups.get(grouping.group_name, ()) + grouping.members))
        audit.append(AuditEntry(grouping.group_name, "grouped", "|".join(present), timestamp))

    for entry in audit:
        logger.info(f"Review: {entry.action} {entry.feature} ({entry.reason})")

    ranked = rank_features(list(importances), list(importances.values()))
    shortlist = RankedFeatureList(ranked.entries, ranked.degenerate, frozenset(removed), groups)
    logger.info(f"✅ Shortlist has {len(shortlist)} feature(s) after review")
    return shortlist, audit


def _split_column(name: str) -> Tuple[str, Optional[int], Optional[str]]:
    """(base feature, window index, one-hot level) of an encoded column name."""
    if "=" in name:
        base, _, level = name.partition("=")
        return base, None, level
    if "@" in name:
        base, _, window = name.partition("@")
        try:
            return base, int(window), None
        except ValueError as e:
            raise CatalogError(f"invalid window in column '{name}'") from e
    return name, None, None


def rebuild_catalog(shortlist: RankedFeatureList, original_catalog: FeatureCatalog) -> FeatureCatalog:
    """
    Reduced catalog encoding only the shortlisted features.

    Windowed columns restrict the entry's windows, one-hot columns restrict its levels,
    and a group becomes one code entry matching the union of its members' prefixes.

    Args:
        shortlist: Reviewed shortlist
        original_catalog: Catalog the ranked columns were encoded from

    Returns:
        FeatureCatalog with one entry per base feature or group
    """
    windows: Dict[str, set] = {}
    levels: Dict[str, List[str]] = {}
    order: List[str] = []

    def resolve(column: str) -> CatalogEntry:
        base, window, level = _split_column(column)
        entry = original_catalog.entry(base)
        if window is not None:
            if window not in entry.active_windows():
                raise CatalogError(f"column '{column}': window {window} not active for '{base}'")
            windows.setdefault(base, set()).add(window)
        if level is not None:
            levels.setdefault(base, [])
            if level not in levels[base]:
                levels[base].append(level)
        return entry

    group_entries: Dict[str, CatalogEntry] = {}
    for name in shortlist.names():
        if name in shortlist.groups:
            members = [resolve(member) for member in shortlist.groups[name]]
            if any(m.matcher.kind != "code" for m in members):
                raise CatalogError(f"group '{name}': only code features can be grouped")
            classes = {m.feature_class for m in members}
            if len(classes) != 1:
                raise CatalogError(f"group '{name}': members span feature classes {sorted(c.value for c in classes)}")
            keys = tuple(dict.fromkeys(k for m in members for k in m.matcher.keys))
            member_windows = set()
            for member_column, member in zip(shortlist.groups[name], members):
                base = member.feature_name
                member_windows |= windows.get(base, set()) if "@" in member_column else set(member.active_windows())
            feature_class = classes.pop()
            entry = CatalogEntry(
                feature_name=name,
                matcher=Matcher("code", keys),
                feature_class=feature_class,
                group_label=name,
                encoding=Encoding.BINARY_PRESENCE,
                windows=tuple(sorted(member_windows)) if member_windows else None,
            )
            group_entries[name] = entry
            order.append(name)
        else:
            base = resolve(name).feature_name
            if base not in order:
                order.append(base)

    rebuilt = []
    for name in order:
        if name in group_entries:
            rebuilt.append(group_entries[name])
            continue
        entry = original_catalog.entry(name)
        if name in windows and tuple(sorted(windows[name])) != entry.active_windows():
            entry = CatalogEntry(
                entry.feature_name, entry.matcher, entry.feature_class, entry.group_label, entry.encoding,
                tuple(sorted(windows[name])),
            )
        if name in levels and set(levels[name]) != set(entry.matcher.levels):
            matcher = Matcher("category", entry.matcher.keys, tuple(sorted(levels[name])))
            entry = CatalogEntry(
                entry.feature_name, matcher, entry.feature_class, entry.group_label, entry.encoding, entry.windows
            )
        rebuilt.append(entry)

    catalog = FeatureCatalog(tuple(rebuilt))
    logger.info(f"Rebuilt catalog with {len(catalog)} entries from {len(shortlist)} shortlisted feature(s)")
    return catalog
