"""Daily embedding production: inference, dedup, aggregation, retention.

A day's pipeline is infer -> dedup -> aggregate -> retain, treated as one
transaction over the aggregated store state. State transitions are pure:
each step returns a new state object, and entries untouched by the day are
shared with the previous state, which is what makes carry-over bit-exact.

Aggregation heuristics:
  acc   keep the latest daily embedding
  ma    E_agg(t) = w * E_agg(t-1) + (1 - w) * E_daily(t)
  ap    average of the entity's two most recent daily embeddings

Aggregated vectors are not re-normalized after the weighted sum; consumers
needing unit norm normalize at read time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .data import EmbeddingRecord, TrainingSample
from .errors import (
    DayGapError,
    EmptyIntersectionError,
    EmptyInputError,
    EmptyUniverseError,
    MixedDaysError,
    WatermarkBehindDayError,
    WeightOutOfRangeError,
    WindowExceedsWatermarkError,
)
from .numerics import cosine_similarity, l2_normalize
from .towers import UpstreamModel, embed_entity
from .trainer import ModelSnapshot, apply_snapshot

ACC = "acc"
MA = "ma"
AP = "ap"

RETENTION_DAYS = 90

EntityKey = tuple[str, int]  # (kind, entity id)


@dataclass(frozen=True)
class AggregationHeuristic:
    kind: str
    w: float = 0.8

    def validate(self) -> None:
        if self.kind not in (ACC, MA, AP):
            raise WeightOutOfRangeError(f"unknown heuristic kind {self.kind!r}")
        if self.kind == MA and not (0.0 <= self.w <= 1.0):
            raise WeightOutOfRangeError(
                f"moving-average weight must lie in [0, 1], got {self.w}"
            )

    @property
    def label(self) -> str:
        return f"ma{self.w:g}" if self.kind == MA else self.kind

    @staticmethod
    def parse(text: str) -> "AggregationHeuristic":
        text = text.strip().lower()
        if text in (ACC, AP):
            h = AggregationHeuristic(text)
        else:
            m = re.fullmatch(r"ma\s*([0-9.]+)", text)
            if not m:
                raise WeightOutOfRangeError(
                    f"cannot parse heuristic {text!r}; expected acc, ap, or ma<w>"
                )
            h = AggregationHeuristic(MA, float(m.group(1)))
        h.validate()
        return h


@dataclass
class DailyEmbeddingSet:
    day: int
    records: dict[EntityKey, EmbeddingRecord]


@dataclass
class StoreEntry:
    vector: np.ndarray
    last_active_day: int


@dataclass
class AggregatedStoreState:
    day: int
    heuristic: AggregationHeuristic
    entries: dict[EntityKey, StoreEntry] = field(default_factory=dict)
    prev_daily: dict[EntityKey, np.ndarray] = field(default_factory=dict)


def initial_state(heuristic: AggregationHeuristic) -> AggregatedStoreState:
    heuristic.validate()
    return AggregatedStoreState(day=0, heuristic=heuristic)


# ---------------------------------------------------------------------------
# inference


def infer_daily(snapshot: ModelSnapshot, model: UpstreamModel, day: int,
                samples: list[TrainingSample], source: str,
                kinds: tuple[str, ...] = ("user", "pin")) -> list[EmbeddingRecord]:
    """Raw per-occurrence embedding stream for one day, pre-dedup.

    Emits one record per entity occurrence per requested kind, in event
    order, so an entity occurring k times yields k records with distinct
    seq numbers. Restricting kinds leaves the other stream empty.
    """
    if snapshot.watermark_day < day:
        raise WatermarkBehindDayError(
            f"snapshot watermark {snapshot.watermark_day} is behind day {day}"
        )
    apply_snapshot(model, snapshot)
    out = []
    for s in samples:
        if "user" in kinds:
            u, _ = embed_entity(model.user_cfg, model.params, "user", s.user)
            out.append(EmbeddingRecord(s.user_id, "user", day, u, source,
                                       s.event_seq))
        if "pin" in kinds:
            p, _ = embed_entity(model.pin_cfg, model.params, "pin", s.pin)
            out.append(EmbeddingRecord(s.pin_id, "pin", day, p, source,
                                       s.event_seq))
    return out


def dedup_day(records: list[EmbeddingRecord],
              day: int | None = None) -> DailyEmbeddingSet:
    """Keep the last embedding of the day per entity (greatest seq wins)."""
    if day is None:
        if not records:
            raise EmptyInputError("cannot infer the day of an empty stream")
        day = records[0].day
    kept: dict[EntityKey, EmbeddingRecord] = {}
    for r in records:
        if r.day != day:
            raise MixedDaysError(
                f"record for day {r.day} in a day-{day} stream"
            )
        key = (r.kind, r.entity_id)
        prev = kept.get(key)
        if prev is None or r.seq > prev.seq:
            kept[key] = r
    return DailyEmbeddingSet(day, kept)


def back_infer(snapshot: ModelSnapshot, model: UpstreamModel,
               window_days: list[int],
               data_by_day: dict[int, list[TrainingSample]],
               source: str) -> list[DailyEmbeddingSet]:
    """Re-infer past days with the one latest snapshot; returns deduped sets."""
    days = sorted(window_days)
    for d in days:
        if not (1 <= d <= snapshot.watermark_day):
            raise WindowExceedsWatermarkError(
                f"back-inference day {d} outside [1, {snapshot.watermark_day}]"
            )
    out = []
    for d in days:
        raw = infer_daily(snapshot, model, d, data_by_day.get(d, []), source)
        out.append(dedup_day(raw, day=d))
    return out


# ---------------------------------------------------------------------------
# aggregation


def aggregate_day(state: AggregatedStoreState,
                  daily: DailyEmbeddingSet) -> AggregatedStoreState:
    """One day's aggregation transition; absent entities carry over untouched."""
    h = state.heuristic
    h.validate()
    if daily.day != state.day + 1:
        raise DayGapError(
            f"daily set for day {daily.day} cannot follow state day {state.day}"
        )
    entries = dict(state.entries)
    prev_daily = dict(state.prev_daily) if h.kind == AP else state.prev_daily
    for key, rec in daily.records.items():
        d = np.asarray(rec.vector, dtype=np.float64)
        prior = entries.get(key)
        if prior is None:
            agg = d.copy()
        elif h.kind == ACC:
            agg = d.copy()
        elif h.kind == MA:
            agg = h.w * prior.vector + (1.0 - h.w) * d
        else:  # AP
            buffered = prev_daily.get(key)
            agg = d.copy() if buffered is None else 0.5 * (buffered + d)
        entries[key] = StoreEntry(agg, daily.day)
        if h.kind == AP:
            prev_daily[key] = d.copy()
    return AggregatedStoreState(daily.day, h, entries, prev_daily)


def apply_retention(state: AggregatedStoreState, current_day: int,
                    window_days: int = RETENTION_DAYS) -> AggregatedStoreState:
    """Evict entities inactive beyond the window; the boundary day survives."""
    if window_days < 1:
        raise WeightOutOfRangeError(f"retention window must be >= 1, got {window_days}")
    cutoff = current_day - window_days
    entries = {k: e for k, e in state.entries.items()
               if e.last_active_day >= cutoff}
    prev_daily = {k: v for k, v in state.prev_daily.items() if k in entries}
    return AggregatedStoreState(state.day, state.heuristic, entries, prev_daily)


# ---------------------------------------------------------------------------
# reporting


@dataclass
class StabilityReport:
    per_entity: dict[EntityKey, float]
    mean: float


def stability_report(before: AggregatedStoreState,
                     after: AggregatedStoreState) -> StabilityReport:
    """Day-to-day cosine similarity over entities present in both states."""
    shared = sorted(set(before.entries) & set(after.entries))
    if not shared:
        raise EmptyIntersectionError(
            "states share no entities; stability is undefined"
        )
    per = {k: cosine_similarity(before.entries[k].vector,
                                after.entries[k].vector) for k in shared}
    return StabilityReport(per, float(np.mean(list(per.values()))))


def coverage_report(state: AggregatedStoreState,
                    universe: dict[str, set[int]]) -> dict[str, float]:
    """Fraction of each kind's universe that has an aggregated embedding."""
    if not any(universe.values()):
        raise EmptyUniverseError("empty entity universe")
    covered: dict[str, float] = {}
    for kind, ids in universe.items():
        if not ids:
            continue
        have = sum(1 for i in ids if (kind, i) in state.entries)
        covered[kind] = have / len(ids)
    return covered


def noisy_daily_stability(heuristic: AggregationHeuristic,
                          num_entities: int = 100, days: int = 30,
                          noise: float = 0.5, seed: int = 0) -> float:
    """Mean day-to-day cosine under i.i.d. noisy daily embeddings.

    Each entity has a fixed base direction; its daily embedding is the base
    plus fresh gaussian noise, normalized. Smoother heuristics score higher.
    """
    rng = np.random.default_rng([seed, 0x57AB])
    base = rng.normal(size=(num_entities, 8))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    state = initial_state(heuristic)
    means = []
    for day in range(1, days + 1):
        noisy = base + noise * rng.normal(size=base.shape)
        records = {
            ("user", i): EmbeddingRecord(i, "user", day,
                                         l2_normalize(noisy[i]), "sim", seq=0)
            for i in range(num_entities)
        }
        new_state = aggregate_day(state, DailyEmbeddingSet(day, records))
        if day > 1:
            means.append(stability_report(state, new_state).mean)
        state = new_state
    return float(np.mean(means))
