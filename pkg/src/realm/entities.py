"""Entity sets extracted from EHR modalities, with provenance.

An entity is a disease or abnormal-finding mention. Entities from the
time-series pipeline carry the z-score evidence that produced them;
entities from the notes pipeline carry the extraction round. Sets are
ordered and deduplicated on the normalized surface form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Optional


def normalize_surface(surface: str) -> str:
    """Lowercase + collapse internal whitespace; the dedupe/matching key."""
    return " ".join(surface.lower().split())


@dataclass(frozen=True)
class Provenance:
    """Where an entity came from.

    modality is "ts" or "text". Time-series entities record the visit and
    z-score of the maximizing cell; text entities record the extraction
    round and (when locatable) the first visit whose note contains them.
    """

    modality: str
    visit_index: Optional[int] = None
    round: Optional[int] = None
    zscore: Optional[float] = None

    def to_dict(self) -> dict:
        d = {"modality": self.modality}
        if self.visit_index is not None:
            d["visit_index"] = self.visit_index
        if self.round is not None:
            d["round"] = self.round
        if self.zscore is not None:
            d["zscore"] = self.zscore
        return d


@dataclass(frozen=True)
class Entity:
    """One extracted mention. ``category`` is None when the extractor does
    not type its output (the refinement loop classifies it on demand)."""

    surface: str
    provenance: Provenance
    category: Optional[str] = None

    @property
    def key(self) -> str:
        return normalize_surface(self.surface)

    def to_dict(self) -> dict:
        d = {"surface": self.surface, "provenance": self.provenance.to_dict()}
        if self.category is not None:
            d["category"] = self.category
        return d


class EntitySet:
    """Ordered, surface-deduplicated collection of entities.

    First occurrence wins: adding an entity whose normalized surface is
    already present is a no-op, which gives union the accumulate-only
    semantics the extraction loop relies on.
    """

    def __init__(self, entities: Iterable[Entity] = ()) -> None:
        self._entities: list[Entity] = []
        self._keys: set[str] = set()
        for e in entities:
            self.add(e)

    def add(self, entity: Entity) -> bool:
        """Insert ``entity`` unless its surface is already present."""
        k = entity.key
        if k in self._keys:
            return False
        self._keys.add(k)
        self._entities.append(entity)
        return True

    def union(self, other: "EntitySet") -> "EntitySet":
        out = EntitySet(self._entities)
        for e in other:
            out.add(e)
        return out

    def surfaces(self) -> list[str]:
        return [e.surface for e in self._entities]

    def keys(self) -> list[str]:
        return [e.key for e in self._entities]

    def __contains__(self, surface: str) -> bool:
        return normalize_surface(surface) in self._keys

    def __iter__(self) -> Iterator[Entity]:
        return iter(self._entities)

    def __len__(self) -> int:
        return len(self._entities)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EntitySet):
            return NotImplemented
        return self.keys() == other.keys()

    def __repr__(self) -> str:
        return f"EntitySet({self.surfaces()!r})"

    @property
    def is_empty(self) -> bool:
        return not self._entities

    def to_dicts(self) -> list[dict]:
        return [e.to_dict() for e in self._entities]
