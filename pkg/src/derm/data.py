"""Shared domain records: feature bundles, embedding records, training samples.

A FeatureBundle is the typed raw-feature map for one (entity, day) or for
one event's context: dense vectors, categorical ids and id sequences keyed
by slot name. Towers resolve slots against their input spec; missing slots
fall back to per-slot defaults (reserved id 0, zero vector).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

USER = "user"
PIN = "pin"

KIND_CODES = {USER: 0, PIN: 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


@dataclass
class FeatureBundle:
    dense: dict[str, np.ndarray] = field(default_factory=dict)
    categorical: dict[str, int] = field(default_factory=dict)
    sequence: dict[str, list[int]] = field(default_factory=dict)

    def copy(self) -> "FeatureBundle":
        return FeatureBundle(
            dense={k: np.array(v) for k, v in self.dense.items()},
            categorical=dict(self.categorical),
            sequence={k: list(v) for k, v in self.sequence.items()},
        )


@dataclass
class EmbeddingRecord:
    """One inferred entity embedding; seq orders records within a day."""

    entity_id: int
    kind: str  # USER or PIN
    day: int
    vector: np.ndarray
    source: str  # producing model tag, e.g. "ctr-upstream"
    seq: int = 0


@dataclass
class TrainingSample:
    user_id: int
    pin_id: int
    day: int
    event_seq: int  # ingestion order within the day
    user: FeatureBundle
    pin: FeatureBundle
    context: FeatureBundle
    labels: dict[str, int]  # task name -> 0/1
