"""Disease knowledge graph: node store, dense name index, entity matching,
and retrieval-text assembly.

Nodes carry (name, definition, description). Matching embeds an entity
string with the same embedder that built the index and takes the
highest-cosine node, subject to the similarity threshold eta. Matched
nodes are rendered into a single retrieval text: an instruction header
followed by one [Disease]/[Definition]/[Description] block per node; with
no matches the text falls back to a bare instruction so downstream
encoders always receive non-empty input.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, asdict
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .embedding import Embedder

DEFAULT_ETA = 0.85

BUNDLE_HEADER = (
    "You are an experienced doctor, and the patient's medical record includes "
    "the following disease entities during a visit. Below are descriptions "
    "related to these diseases. Please combine the severity of the patient's "
    "condition in the medical record and the severity of the disease to assess "
    "their health status."
)

FALLBACK_TEXT = (
    "You are an experienced doctor, please combine your background knowledge "
    "and the patient's records to judge their health status."
)

_BLOCK_RE = re.compile(
    r"\[Disease\] (?P<name>.*?)\n\n\[Definition\] (?P<definition>.*?)\n\n\[Description\] (?P<description>.*?)(?=\n\n\[Disease\] |\Z)",
    re.DOTALL,
)


class KgError(ValueError):
    pass


@dataclass(frozen=True)
class KgNode:
    id: str
    name: str
    definition: str
    description: str
    category: str = "disease"

    def __post_init__(self) -> None:
        if not self.id:
            raise KgError("node id must be non-empty")
        if not self.name:
            raise KgError(f"node {self.id}: name must be non-empty")

    def to_dict(self) -> dict:
        return asdict(self)


class KnowledgeGraph:
    def __init__(self, nodes: Sequence[KgNode]) -> None:
        self.nodes = list(nodes)
        self.by_id = {n.id: n for n in self.nodes}
        if len(self.by_id) != len(self.nodes):
            raise KgError("duplicate node ids")

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: str) -> KgNode:
        try:
            return self.by_id[node_id]
        except KeyError:
            raise KgError(f"unknown node id {node_id!r}") from None

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeGraph":
        nodes = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    nodes.append(KgNode(**json.loads(line)))
        return cls(nodes)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for n in self.nodes:
                fh.write(json.dumps(n.to_dict(), sort_keys=True) + "\n")


def toy_kg_path() -> Path:
    """The miniature disease KG shipped with the package."""
    return Path(str(resources.files("realm").joinpath("data/toy_kg.jsonl")))


def load_toy_kg() -> KnowledgeGraph:
    return KnowledgeGraph.load(toy_kg_path())


# ---------------------------------------------------------------------------
# Similarity and matching
# ---------------------------------------------------------------------------

def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity, clamped to [-1, 1] against float round-off."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise KgError(f"vector lengths differ: {u.shape[0]} vs {v.shape[0]}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise KgError("undefined similarity: zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass
class NodeIndex:
    """L2-normalized embeddings of node names, row-aligned with node_ids."""

    node_ids: list[str]
    embeddings: np.ndarray
    embedder_id: str

    def __post_init__(self) -> None:
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.node_ids):
            raise KgError("embeddings must be one row per node id")
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise KgError("index rows must be unit-norm")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def save(self, path: str | Path) -> None:
        header = {
            "D": self.dim,
            "count": len(self.node_ids),
            "embedder_id": self.embedder_id,
            "node_ids": self.node_ids,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(self.embeddings.astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> "NodeIndex":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            blob = fh.read()
        d, count = int(header["D"]), int(header["count"])
        if len(blob) != 4 * d * count:
            raise KgError(f"index payload is {len(blob)} bytes, expected {4 * d * count}")
        mat = np.frombuffer(blob, dtype="<f4").reshape(count, d).copy()
        return cls(node_ids=list(header["node_ids"]), embeddings=mat, embedder_id=header["embedder_id"])


def build_index(kg: KnowledgeGraph, embedder: Embedder) -> NodeIndex:
    """Embed every node name (names are the match targets; definitions and
    descriptions are bundle payload only)."""
    if len(kg) == 0:
        raise KgError("cannot index an empty knowledge graph")
    names = [n.name for n in kg.nodes]
    try:
        mat = embedder.embed(names)
    except Exception as exc:
        raise KgError(f"embedder failed while indexing nodes: {exc}") from exc
    mat = np.asarray(mat, dtype=np.float32)
    norms = np.linalg.norm(mat.astype(np.float64), axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise KgError(f"embedder produced a zero vector for node {kg.nodes[int(bad[0])].id!r}")
    mat = (mat.astype(np.float64) / norms[:, None]).astype(np.float32)
    return NodeIndex(node_ids=[n.id for n in kg.nodes], embeddings=mat, embedder_id=embedder.id)


def match_entity(
    entity: str, index: NodeIndex, embedder: Embedder, eta: float = DEFAULT_ETA
) -> Optional[tuple[str, float]]:
    """Best node for an entity string, or None below the threshold.

    The entity is embedded with the same embedder that built the index so
    both sides live in one vector space. Exact similarity ties break to
    the lowest node id for reproducibility.
    """
    if not 0 < eta <= 1:
        raise KgError(f"eta must be in (0, 1], got {eta}")
    if len(index.node_ids) == 0:
        raise KgError("empty index")
    if embedder.id != index.embedder_id:
        raise KgError(
            f"index built with {index.embedder_id!r} but query embedder is {embedder.id!r}"
        )
    q = embedder.embed([entity])[0].astype(np.float64)
    nq = np.linalg.norm(q)
    if nq == 0.0:
        raise KgError("undefined similarity: zero query vector")
    sims = index.embeddings.astype(np.float64) @ (q / nq)
    sims = np.clip(sims, -1.0, 1.0)
    best = float(np.max(sims))
    if best < eta:
        return None
    tied = np.flatnonzero(sims == best)
    node_id = min(index.node_ids[int(i)] for i in tied)
    return node_id, best


# ---------------------------------------------------------------------------
# Retrieval-text assembly
# ---------------------------------------------------------------------------

@dataclass
class KnowledgeBundle:
    """Assembled retrieval text for one patient and one modality."""

    source_modality: str
    matched: list[tuple[str, str, float]]  # (entity, node_id, similarity)
    text: str
    is_fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "source_modality": self.source_modality,
            "matched": [[e, n, s] for e, n, s in self.matched],
            "text": self.text,
            "is_fallback": self.is_fallback,
        }


def _single_line(text: str) -> str:
    return " ".join(text.split())


def render_block(node: KgNode) -> str:
    return (
        f"[Disease] {_single_line(node.name)}\n\n"
        f"[Definition] {_single_line(node.definition)}\n\n"
        f"[Description] {_single_line(node.description)}"
    )


def assemble_bundle(
    matches: Sequence[tuple[str, str, float]],
    kg: KnowledgeGraph,
    modality: str,
) -> KnowledgeBundle:
    """Render matched nodes into the retrieval text, in match order. Zero
    matches produce the fallback instruction so the text is never empty."""
    if not matches:
        return KnowledgeBundle(
            source_modality=modality, matched=[], text=FALLBACK_TEXT, is_fallback=True
        )
    blocks = []
    for _entity, node_id, _sim in matches:
        blocks.append(render_block(kg.node(node_id)))
    text = BUNDLE_HEADER + "\n\nReferences:\n\n" + "\n\n".join(blocks)
    return KnowledgeBundle(
        source_modality=modality,
        matched=[(e, n, float(s)) for e, n, s in matches],
        text=text,
        is_fallback=False,
    )


def parse_bundle_text(text: str) -> tuple[str, list[tuple[str, str, str]]]:
    """Left inverse of assembly: split a bundle text back into its header
    and (name, definition, description) blocks. Fallback texts parse as
    (text, [])."""
    marker = "\n\nReferences:\n\n"
    if marker not in text:
        return text, []
    header, body = text.split(marker, 1)
    blocks = [
        (m.group("name"), m.group("definition"), m.group("description"))
        for m in _BLOCK_RE.finditer(body)
    ]
    return header, blocks
