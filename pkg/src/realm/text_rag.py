"""Disease-entity extraction from clinical notes.

Extraction runs in rounds: each round's output is unioned into an
accumulator, then a three-step refinement discards (1) entities that do
not occur in the source text, (2) entities that are not diseases, and
(3) semantic near-duplicates. The loop stops when the refined set is
stable or the round budget is spent. Step (1) makes the final set sound
against arbitrary extractor hallucination: nothing survives that is not a
case-insensitive substring of the notes.

Two extractors ship: a deterministic lexicon matcher (offline tests,
synthetic runs) and a remote chat-endpoint client.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .embedding import Embedder
from .entities import Entity, EntitySet, Provenance, normalize_surface

LLM_URL_ENV = "REALM_LLM_URL"
LLM_KEY_ENV = "REALM_LLM_KEY"

DEFAULT_EXTRACTION_PROMPT = (
    "Perform named entity recognition restricted to disease names on the "
    "medical case description given as input. Extract only diseases that "
    "appear verbatim in the input text and return them as JSON of the form "
    '{"entities": ["first disease", "second disease"]} with no other content.'
)

DEFAULT_CLASSIFY_PROMPT = (
    "The input is a JSON list of candidate terms. Return the subset that are "
    'disease names, as JSON of the form {"entities": [...]} with no other content.'
)

DISEASE_CATEGORY = "disease"


class TextRagError(ValueError):
    pass


class ExtractionTransportError(RuntimeError):
    """Transient remote failure; carries the round it happened in."""

    def __init__(self, message: str, round_index: int) -> None:
        super().__init__(f"{message} (extraction round {round_index})")
        self.round_index = round_index


@dataclass
class ExtractionConfig:
    prompt_template: str = DEFAULT_EXTRACTION_PROMPT
    max_rounds: int = 3
    dedupe_threshold: float = 0.9
    extractor_kind: str = "lexicon"

    def __post_init__(self) -> None:
        if not self.prompt_template:
            raise TextRagError("prompt_template must be non-empty")
        if self.max_rounds < 1:
            raise TextRagError(f"max_rounds must be >= 1, got {self.max_rounds}")
        if not 0 < self.dedupe_threshold <= 1:
            raise TextRagError(
                f"dedupe_threshold must be in (0, 1], got {self.dedupe_threshold}"
            )


class EntityExtractor(Protocol):
    def extract(self, text: str) -> list: ...

    def classify(self, surfaces: Sequence[str]) -> dict[str, str]: ...


# ---------------------------------------------------------------------------
# Lexicon matcher
# ---------------------------------------------------------------------------

def lexicon_extract(
    text: str, lexicon: Sequence[tuple[str, str]]
) -> list[tuple[str, str]]:
    """Left-to-right, case-insensitive, word-boundary scan of ``text`` for
    lexicon terms. Longest term wins at each position and anything
    overlapping an accepted match is suppressed."""
    terms = [t for t, _cat in lexicon]
    if len(set(terms)) != len(terms):
        raise TextRagError("lexicon terms must be unique")
    if any(t != t.lower() for t in terms):
        raise TextRagError("lexicon terms must be lowercase")
    if not text or not lexicon:
        return []
    by_term = {t: c for t, c in lexicon}
    ordered = sorted(terms, key=len, reverse=True)
    pattern = re.compile(
        r"\b(?:" + "|".join(re.escape(t) for t in ordered) + r")\b", re.IGNORECASE
    )
    out = []
    for m in pattern.finditer(text):
        term = " ".join(m.group(0).lower().split())
        out.append((term, by_term[term]))
    return out


class LexiconExtractor:
    """Deterministic offline extractor backed by a (term, category) list."""

    def __init__(self, lexicon: Sequence[tuple[str, str]]) -> None:
        self.lexicon = list(lexicon)
        self._categories = {t: c for t, c in self.lexicon}

    def extract(self, text: str) -> list[tuple[str, str]]:
        return lexicon_extract(text, self.lexicon)

    def classify(self, surfaces: Sequence[str]) -> dict[str, str]:
        return {
            s: self._categories.get(normalize_surface(s), "unknown") for s in surfaces
        }


def load_lexicon(path: str | Path) -> list[tuple[str, str]]:
    rows = json.loads(Path(path).read_text(encoding="utf-8"))
    return [(r["term"], r["category"]) for r in rows]


def default_lexicon() -> list[tuple[str, str]]:
    """The lexicon shipped with the package; terms mirror the toy KG."""
    return load_lexicon(str(resources.files("realm").joinpath("data/lexicon.json")))


# ---------------------------------------------------------------------------
# Remote chat-endpoint extractor
# ---------------------------------------------------------------------------

class RemoteExtractor:
    """HTTP client for an LLM extraction endpoint.

    Request: POST {url} with JSON {"prompt": ..., "input": ...}; the
    response body must contain {"entities": [string, ...]}. Classification
    for the disease-type filter reuses the same wire shape with a second
    prompt. ``post`` is injectable for tests.
    """

    def __init__(
        self,
        url: Optional[str] = None,
        api_key: Optional[str] = None,
        prompt_template: str = DEFAULT_EXTRACTION_PROMPT,
        classify_prompt: str = DEFAULT_CLASSIFY_PROMPT,
        post: Optional[Callable] = None,
        timeout: float = 60.0,
    ) -> None:
        self.url = url or os.environ.get(LLM_URL_ENV, "")
        self.api_key = api_key if api_key is not None else os.environ.get(LLM_KEY_ENV, "")
        if not self.url:
            raise TextRagError(f"no extraction endpoint configured (set {LLM_URL_ENV})")
        self.prompt_template = prompt_template
        self.classify_prompt = classify_prompt
        if post is None:
            import requests

            post = requests.post
        self._post = post
        self.timeout = timeout

    def _call(self, prompt: str, text: str) -> list:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._post(
                self.url,
                json={"prompt": prompt, "input": text},
                headers=headers,
                timeout=self.timeout,
            )
        except Exception as exc:
            raise ConnectionError(f"extraction endpoint {self.url} unreachable: {exc}") from exc
        status = getattr(resp, "status_code", 200)
        if status >= 400:
            raise ConnectionError(f"extraction endpoint {self.url} returned HTTP {status}")
        try:
            return resp.json()["entities"]
        except Exception:
            return []  # malformed output is tolerated, not fatal

    def extract(self, text: str) -> list:
        return [(s, None) for s in self._call(self.prompt_template, text) if isinstance(s, str)]

    def classify(self, surfaces: Sequence[str]) -> dict[str, str]:
        kept = self._call(self.classify_prompt, json.dumps(list(surfaces)))
        kept_keys = {normalize_surface(s) for s in kept if isinstance(s, str)}
        return {
            s: (DISEASE_CATEGORY if normalize_surface(s) in kept_keys else "other")
            for s in surfaces
        }


# ---------------------------------------------------------------------------
# Round / refine / loop
# ---------------------------------------------------------------------------

def _sanitize(raw: object) -> list[tuple[str, Optional[str]]]:
    """Coerce arbitrary extractor output into (surface, category) pairs;
    anything unrecognizable is dropped."""
    if not isinstance(raw, (list, tuple)):
        return []
    out: list[tuple[str, Optional[str]]] = []
    for item in raw:
        if isinstance(item, str):
            surface, category = item, None
        elif isinstance(item, (list, tuple)) and len(item) == 2 and isinstance(item[0], str):
            surface = item[0]
            category = item[1] if isinstance(item[1], str) else None
        else:
            continue
        if surface.strip():
            out.append((surface, category))
    return out


def extract_round(
    extractor: EntityExtractor,
    cfg: ExtractionConfig,
    text: str,
    round_index: int = 1,
) -> list[tuple[str, Optional[str]]]:
    """One extractor invocation. Empty or malformed output comes back as an
    empty list; only transport failures raise (retriable, tagged with the
    round)."""
    if not text:
        raise TextRagError("text must be non-empty")
    try:
        raw = extractor.extract(text)
    except (ConnectionError, TimeoutError, OSError) as exc:
        raise ExtractionTransportError(str(exc), round_index) from exc
    return _sanitize(raw)


def refine(
    entities: EntitySet,
    text: str,
    extractor: EntityExtractor,
    embedder: Embedder,
    cfg: ExtractionConfig,
) -> tuple[EntitySet, EntitySet]:
    """Three filters, in order: occurrence in the source text, disease
    type, semantic dedupe (first in order wins any pair whose embedding
    cosine reaches the threshold). Returns (kept, removed)."""
    removed = EntitySet()
    norm_text = normalize_surface(text)

    present: list[Entity] = []
    for e in entities:
        if e.key and e.key in norm_text:
            present.append(e)
        else:
            removed.add(e)

    need_class = [e.surface for e in present if e.category is None]
    categories = extractor.classify(need_class) if need_class else {}
    diseases: list[Entity] = []
    for e in present:
        cat = e.category if e.category is not None else categories.get(e.surface, "unknown")
        if cat == DISEASE_CATEGORY:
            diseases.append(e)
        else:
            removed.add(e)

    kept = EntitySet()
    if diseases:
        vecs = np.asarray(embedder.embed([e.surface for e in diseases]), dtype=np.float64)
        kept_rows: list[np.ndarray] = []
        for e, v in zip(diseases, vecs):
            nv = np.linalg.norm(v)
            u = v / nv if nv > 0 else v
            if any(float(np.dot(u, w)) >= cfg.dedupe_threshold for w in kept_rows):
                removed.add(e)
            else:
                kept.add(e)
                kept_rows.append(u)
    return kept, removed


@dataclass
class ExtractionResult:
    entities: EntitySet
    rounds: int
    converged: bool

    @property
    def no_entities(self) -> bool:
        return self.entities.is_empty


def _first_visit_with(surface: str, notes: Sequence[Optional[str]]) -> Optional[int]:
    key = normalize_surface(surface)
    for i, note in enumerate(notes):
        if note and key in normalize_surface(note):
            return i
    return None


def extract_entities_loop(
    extractor: EntityExtractor,
    embedder: Embedder,
    cfg: ExtractionConfig,
    text: str,
    notes: Optional[Sequence[Optional[str]]] = None,
) -> ExtractionResult:
    """Alternate extraction rounds (set union into an accumulator) with
    refinement until the refined set stops changing or ``max_rounds`` is
    reached. An all-empty outcome is a valid result: the empty set is the
    no-entities marker that triggers the fallback bundle downstream."""
    accumulated = EntitySet()
    refined = EntitySet()
    converged = False
    rounds = 0
    for i in range(1, cfg.max_rounds + 1):
        rounds = i
        for surface, category in extract_round(extractor, cfg, text, round_index=i):
            visit = _first_visit_with(surface, notes) if notes is not None else None
            accumulated.add(
                Entity(
                    surface=surface,
                    provenance=Provenance(modality="text", visit_index=visit, round=i),
                    category=category,
                )
            )
        new_refined, _removed = refine(accumulated, text, extractor, embedder, cfg)
        if i > 1 and new_refined == refined:
            refined = new_refined
            converged = True
            break
        refined = new_refined
    return ExtractionResult(entities=refined, rounds=rounds, converged=converged)
