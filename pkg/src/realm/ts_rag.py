"""Rule-based abnormal-feature extraction from lab time series.

Each numeric feature gets a mean and standard deviation derived from its
clinical reference range; observed cells are z-scored against them and a
feature whose largest |z| exceeds the threshold becomes an extractable
entity (its canonical lowercase name), carrying the maximizing cell as
provenance. Missing cells and categorical features are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ehr_core import FeatureSpec, PatientRecord
from .entities import Entity, EntitySet, Provenance

DEFAULT_TS_THRESHOLD = 3.0


class TsRagError(ValueError):
    pass


@dataclass(frozen=True)
class TsAnomaly:
    """One out-of-range feature observation: the cell with the largest
    absolute z-score for its feature."""

    feature_name: str
    visit_index: int
    value: float
    zscore: float
    direction: str  # "high" | "low"


def reference_stats(spec: FeatureSpec) -> tuple[float, float]:
    """Mean/std implied by the reference range: midpoint and quarter-width
    (range read as +-2 sigma coverage)."""
    if spec.ref_low == spec.ref_high:
        raise TsRagError(f"feature {spec.name!r}: zero-width reference range")
    mean = (spec.ref_low + spec.ref_high) / 2.0
    std = (spec.ref_high - spec.ref_low) / 4.0
    return mean, std


def zscore(value: float, mean: float, std: float) -> float:
    if std <= 0:
        raise TsRagError(f"std must be positive, got {std}")
    return (value - mean) / std


def find_anomalies(
    rec: PatientRecord, features: Sequence[FeatureSpec], eps: float = DEFAULT_TS_THRESHOLD
) -> list[TsAnomaly]:
    """Scan observed cells per numeric feature; report the max-|z| cell of
    every feature whose deviation exceeds ``eps``. Output follows feature
    order, one anomaly per feature at most."""
    if eps <= 0:
        raise TsRagError(f"eps must be positive, got {eps}")
    out: list[TsAnomaly] = []
    ts = np.asarray(rec.ts, dtype=np.float64)
    for j, spec in enumerate(features):
        if spec.is_categorical:
            continue
        mean, std = reference_stats(spec)
        col = ts[:, j]
        observed = np.flatnonzero(~np.isnan(col))
        if observed.size == 0:
            continue
        z = (col[observed] - mean) / std
        k = int(np.argmax(np.abs(z)))
        if abs(z[k]) > eps:
            visit = int(observed[k])
            out.append(
                TsAnomaly(
                    feature_name=spec.name.lower(),
                    visit_index=visit,
                    value=float(col[visit]),
                    zscore=float(z[k]),
                    direction="high" if z[k] > 0 else "low",
                )
            )
    return out


def extract_ts_entities(
    rec: PatientRecord, features: Sequence[FeatureSpec], eps: float = DEFAULT_TS_THRESHOLD
) -> EntitySet:
    """Anomalies as an EntitySet: surface = canonical lowercase feature
    name, provenance = the maximizing visit and its z-score."""
    entities = EntitySet()
    for a in find_anomalies(rec, features, eps):
        entities.add(
            Entity(
                surface=a.feature_name,
                provenance=Provenance(modality="ts", visit_index=a.visit_index, zscore=a.zscore),
                category="finding",
            )
        )
    return entities
