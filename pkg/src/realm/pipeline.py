"""Glue between raw records and model tensors: run both retrieval
pipelines per patient, match entities against the knowledge graph,
assemble retrieval texts, then embed and pad everything into Batch
tensors. All text embedding goes through the configured embedder, so a
disk cache makes repeated runs over one cohort cheap."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .ehr_core import Dataset, FeatureSpec, PatientRecord, impute_matrix
from .embedding import Embedder
from .entities import EntitySet
from .kg_engine import KnowledgeBundle, KnowledgeGraph, NodeIndex, assemble_bundle, match_entity
from .model import Batch
from .text_rag import EntityExtractor, ExtractionConfig, extract_entities_loop
from .ts_rag import extract_ts_entities, reference_stats


@dataclass
class PatientEnhancement:
    """Retrieval outputs for one patient: entity sets, their KG matches,
    and the assembled per-modality bundles."""

    entities_ts: EntitySet
    entities_text: EntitySet
    matches_ts: list[tuple[str, str, float]]
    matches_text: list[tuple[str, str, float]]
    bundle_ts: KnowledgeBundle
    bundle_text: KnowledgeBundle

    def all_surfaces(self) -> list[str]:
        seen = []
        for e in list(self.entities_ts) + list(self.entities_text):
            if e.key not in seen:
                seen.append(e.key)
        return seen


def _match_set(
    entities: EntitySet, index: NodeIndex, embedder: Embedder, eta: float
) -> list[tuple[str, str, float]]:
    out = []
    for e in entities:
        m = match_entity(e.surface, index, embedder, eta)
        if m is not None:
            out.append((e.surface, m[0], m[1]))
    return out


def enhance_patient(
    rec: PatientRecord,
    features: Sequence[FeatureSpec],
    kg: KnowledgeGraph,
    index: NodeIndex,
    embedder: Embedder,
    extractor: EntityExtractor,
    ext_cfg: ExtractionConfig,
    eps: float,
    eta: float,
) -> PatientEnhancement:
    entities_ts = extract_ts_entities(rec, features, eps)
    joined = "\n".join(n for n in rec.notes if n)
    if joined.strip():
        entities_text = extract_entities_loop(
            extractor, embedder, ext_cfg, joined, notes=rec.notes
        ).entities
    else:
        entities_text = EntitySet()
    matches_ts = _match_set(entities_ts, index, embedder, eta)
    matches_text = _match_set(entities_text, index, embedder, eta)
    return PatientEnhancement(
        entities_ts=entities_ts,
        entities_text=entities_text,
        matches_ts=matches_ts,
        matches_text=matches_text,
        bundle_ts=assemble_bundle(matches_ts, kg, "ts"),
        bundle_text=assemble_bundle(matches_text, kg, "text"),
    )


def enhance_dataset(
    ds: Dataset,
    kg: KnowledgeGraph,
    index: NodeIndex,
    embedder: Embedder,
    extractor: EntityExtractor,
    ext_cfg: ExtractionConfig,
    eps: float,
    eta: float,
) -> dict[str, PatientEnhancement]:
    return {
        p.id: enhance_patient(p, ds.features, kg, index, embedder, extractor, ext_cfg, eps, eta)
        for p in ds.patients
    }


def standardize_matrix(ts: np.ndarray, features: Sequence[FeatureSpec]) -> np.ndarray:
    """Scale every feature by its reference-range stats so the recurrent
    encoder sees comparable magnitudes (planted anomalies sit beyond 3)."""
    out = np.empty_like(ts)
    for j, spec in enumerate(features):
        mean, std = reference_stats(spec)
        out[:, j] = (ts[:, j] - mean) / std
    return out


def build_batch(
    ds: Dataset,
    enhancements: dict[str, PatientEnhancement],
    embedder: Embedder,
    task: str = "mortality",
    t_pad: Optional[int] = None,
) -> Batch:
    """Impute, standardize, embed, and pad a cohort into model tensors."""
    n = len(ds.patients)
    if n == 0:
        raise ValueError("empty dataset")
    t_pad = t_pad or max(p.n_visits for p in ds.patients)
    f = len(ds.features)
    d = embedder.dim

    ts = np.zeros((n, t_pad, f), dtype=np.float32)
    times = np.zeros((n, t_pad), dtype=np.float32)
    note_vecs = np.zeros((n, t_pad, d), dtype=np.float32)
    rag_ts = np.zeros((n, d), dtype=np.float32)
    rag_text = np.zeros((n, d), dtype=np.float32)
    visit_mask = np.zeros((n, t_pad), dtype=bool)
    note_mask = np.zeros((n, t_pad), dtype=bool)
    y = np.zeros(n, dtype=np.float32)
    ids = []

    for i, p in enumerate(ds.patients):
        t = min(p.n_visits, t_pad)
        filled, _observed = impute_matrix(p.ts[:t], ds.features)
        ts[i, :t] = standardize_matrix(filled, ds.features).astype(np.float32)
        times[i, :t] = p.times[:t].astype(np.float32)
        visit_mask[i, :t] = True
        noted = [(v, note) for v, note in enumerate(p.notes[:t]) if note]
        if noted:
            vecs = embedder.embed([note for _v, note in noted])
            for (v, _note), vec in zip(noted, vecs):
                note_vecs[i, v] = vec
                note_mask[i, v] = True
        enh = enhancements[p.id]
        rag_ts[i] = embedder.embed([enh.bundle_ts.text])[0]
        rag_text[i] = embedder.embed([enh.bundle_text.text])[0]
        y[i] = p.label(task)
        ids.append(p.id)

    return Batch(
        ts=torch.from_numpy(ts),
        times=torch.from_numpy(times),
        note_vecs=torch.from_numpy(note_vecs),
        rag_ts=torch.from_numpy(rag_ts),
        rag_text=torch.from_numpy(rag_text),
        visit_mask=torch.from_numpy(visit_mask),
        note_mask=torch.from_numpy(note_mask),
        y=torch.from_numpy(y),
        ids=ids,
    )
