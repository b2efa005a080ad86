"""Experiment runner: the main training run, the RAG and fusion ablation
grids, the data-sparsity sweep, and permutation-based entity importance.

Every experiment writes a run directory:

    runs/<name>/
      config.json    resolved config + the derived per-component seeds
      history.jsonl  per-epoch training curves, tagged by cell and seed
      metrics.json   per-cell bootstrap reports (x100 mirrors included)
      model.ckpt     primary cell checkpoint (full configuration, seed 0)
      table.md       rendered results table
      cells/         per-cell checkpoints
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from . import metrics
from .checkpoint import save_checkpoint
from .config import RunConfig, substream
from .ehr_core import (
    CohortConfig,
    Dataset,
    generate_synthetic_cohort,
    load_dataset,
    sparsify_training_set,
    split_dataset,
)
from .embedding import make_embedder
from .entities import normalize_surface
from .kg_engine import KnowledgeGraph, build_index, load_toy_kg
from .model import Batch, ModelConfig, build_model
from .pipeline import PatientEnhancement, build_batch, enhance_dataset
from .text_rag import (
    ExtractionConfig,
    LexiconExtractor,
    RemoteExtractor,
    default_lexicon,
    load_lexicon,
)
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

RAG_ABLATION_CELLS = ("ts_only", "ts_rag", "text_only", "text_rag", "full")
FUSION_ABLATION_CELLS = ("fusion_add", "fusion_concat", "fusion_attention")

EXPERIMENT_KINDS = ("main", "ablate_rag", "ablate_fusion", "sparsity", "importance")


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Data preparation shared by all experiment kinds
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class PreparedData:
    dataset: Dataset
    splits: tuple[Dataset, Dataset, Dataset]
    kg: KnowledgeGraph
    enhancements: dict[str, PatientEnhancement]
    batches: dict[str, Batch]  # train/val/test
    t_pad: int
    embedder: object
    task: str

    def batch_for(self, ds: Dataset) -> Batch:
        return build_batch(ds, self.enhancements, self.embedder, self.task, self.t_pad)


def make_extractor(cfg: RunConfig):
    if cfg.extractor.kind == "lexicon":
        lex = (
            load_lexicon(cfg.extractor.lexicon_path)
            if cfg.extractor.lexicon_path
            else default_lexicon()
        )
        return LexiconExtractor(lex)
    return RemoteExtractor()


def load_or_generate_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.path is not None:
        return load_dataset(cfg.data.path)
    gen_cfg = CohortConfig(
        n_patients=cfg.data.n_patients,
        t_max=cfg.data.t_max,
        t_min=cfg.data.t_min,
        prevalence=cfg.data.prevalence,
        obs_rate=cfg.data.obs_rate,
        note_rate=cfg.data.note_rate,
        anomaly_weight=cfg.data.anomaly_weight,
        mention_weight=cfg.data.mention_weight,
        plant_probe_entities=cfg.data.plant_probe_entities,
        seed=cfg.seed_for("data"),
    )
    return generate_synthetic_cohort(gen_cfg)


def prepare_data(cfg: RunConfig) -> PreparedData:
    embedder = make_embedder(
        cfg.embedder.kind,
        cfg.embedder.dim,
        cache_dir=cfg.embedder.cache_dir,
        model_id=cfg.embedder.model_id,
    )
    kg = KnowledgeGraph.load(cfg.kg_path) if cfg.kg_path else load_toy_kg()
    index = build_index(kg, embedder)
    extractor = make_extractor(cfg)
    ext_cfg = ExtractionConfig(
        max_rounds=cfg.extractor.max_rounds,
        dedupe_threshold=cfg.thresholds.dedupe,
        extractor_kind=cfg.extractor.kind,
    )
    ds = load_or_generate_dataset(cfg)
    splits = split_dataset(ds, tuple(cfg.split), seed=cfg.seed_for("split"))
    log.info("dataset: %d patients (train %d / val %d / test %d)", len(ds), *map(len, splits))
    enhancements = enhance_dataset(
        ds, kg, index, embedder, extractor, ext_cfg, cfg.thresholds.eps, cfg.thresholds.eta
    )
    t_pad = max(p.n_visits for p in ds.patients)
    task = cfg.train.task
    batches = {
        name: build_batch(split, enhancements, embedder, task, t_pad)
        for name, split in zip(("train", "val", "test"), splits)
    }
    return PreparedData(
        dataset=ds,
        splits=splits,
        kg=kg,
        enhancements=enhancements,
        batches=batches,
        t_pad=t_pad,
        embedder=embedder,
        task=task,
    )


# ---------------------------------------------------------------------------
# Model variants
# ---------------------------------------------------------------------------

def variant_model_config(cfg: RunConfig, cell: str, n_features: int) -> ModelConfig:
    m = cfg.model
    base = dict(
        n_features=n_features,
        embed_dim=cfg.embedder.dim,
        hidden=m.hidden,
        heads=m.heads,
        time_freqs=m.time_freqs,
        omega_max=m.omega_max,
        ffn_mult=m.ffn_mult,
        rag_injection=m.rag_injection,
    )
    variants = {
        "full": dict(modalities=("ts", "text"), rag_ts=m.rag_ts, rag_text=m.rag_text, fusion=m.fusion),
        "ts_only": dict(modalities=("ts",), rag_ts=False, rag_text=False, fusion="attention"),
        "ts_rag": dict(modalities=("ts",), rag_ts=True, rag_text=False, fusion="attention"),
        "text_only": dict(modalities=("text",), rag_ts=False, rag_text=False, fusion="attention"),
        "text_rag": dict(modalities=("text",), rag_ts=False, rag_text=True, fusion="attention"),
        "fusion_add": dict(modalities=("ts", "text"), rag_ts=False, rag_text=False, fusion="add"),
        "fusion_concat": dict(modalities=("ts", "text"), rag_ts=False, rag_text=False, fusion="concat"),
        "fusion_attention": dict(modalities=("ts", "text"), rag_ts=False, rag_text=False, fusion="attention"),
    }
    if cell not in variants:
        raise ExperimentError(f"unknown cell {cell!r}")
    return ModelConfig(**base, **variants[cell])


def train_cell(
    cfg: RunConfig,
    model_cfg: ModelConfig,
    train_batch: Batch,
    val_batch: Batch,
    test_batch: Batch,
    cell: str,
    seed_index: int,
):
    """One training run: returns (trained model, history, test scores,
    bootstrap report)."""
    init_seed = substream(cfg.seed, f"init/{cell}/{seed_index}")
    model = build_model(model_cfg, seed=init_seed)
    tcfg = TrainConfig(
        batch_size=cfg.train.batch_size,
        max_epochs=cfg.train.max_epochs,
        patience=cfg.train.patience,
        lr=cfg.train.lr,
        weight_decay=cfg.train.weight_decay,
        seed=substream(cfg.seed, f"train/{cell}/{seed_index}"),
    )
    result = train(model, train_batch, val_batch, tcfg,
                   shuffle_seed=substream(cfg.seed, f"shuffle/{cell}/{seed_index}"))
    scores, report = evaluate(
        result.model,
        test_batch,
        b=cfg.experiment.bootstrap_b,
        seed=substream(cfg.seed, f"bootstrap/{cell}/{seed_index}"),
    )
    return result, scores, report


# ---------------------------------------------------------------------------
# Entity importance (permutation-based)
# ---------------------------------------------------------------------------

def entity_importance(
    entity_sets: Sequence[Iterable[str]],
    labels: Sequence[int],
    seed: int = 0,
    n_permutations: int = 10,
) -> list[tuple[str, float]]:
    """Rank entities by how much shuffling their presence column hurts an
    L2-regularized logistic model's in-sample AUROC (mean drop over
    ``n_permutations`` shuffles)."""
    labels = np.asarray(labels).astype(int)
    vocab = sorted({normalize_surface(s) for row in entity_sets for s in row})
    if len(vocab) < 2:
        raise ExperimentError(f"need at least 2 distinct entities, got {len(vocab)}")
    col = {e: j for j, e in enumerate(vocab)}
    x = np.zeros((len(labels), len(vocab)), dtype=np.float64)
    for i, row in enumerate(entity_sets):
        for s in row:
            x[i, col[normalize_surface(s)]] = 1.0
    if np.all(x.min(axis=0) == x.max(axis=0)):
        raise ExperimentError("degenerate entity matrix: every column is constant")
    if labels.min() == labels.max():
        raise ExperimentError("labels must contain both classes")

    clf = LogisticRegression(C=1.0, solver="lbfgs", max_iter=1000)
    clf.fit(x, labels)
    base = metrics.auroc(clf.predict_proba(x)[:, 1], labels)
    rng = np.random.default_rng(seed)
    importances = []
    for j, name in enumerate(vocab):
        drops = []
        for _ in range(n_permutations):
            xp = x.copy()
            xp[:, j] = xp[rng.permutation(len(labels)), j]
            drops.append(base - metrics.auroc(clf.predict_proba(xp)[:, 1], labels))
        importances.append((name, float(np.mean(drops))))
    importances.sort(key=lambda kv: (-kv[1], kv[0]))
    return importances


# ---------------------------------------------------------------------------
# Run directory plumbing
# ---------------------------------------------------------------------------

def _write_run_files(
    out_dir: Path,
    cfg: RunConfig,
    payload: dict,
    history_rows: list[dict],
    table: str,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    with open(out_dir / "history.jsonl", "w", encoding="utf-8") as fh:
        for row in history_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (out_dir / "metrics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out_dir / "table.md").write_text(table, encoding="utf-8")


def render_table(payload: dict) -> str:
    """Markdown table of per-cell results, metrics x100, 'mean±std'."""
    kind = payload.get("kind", "run")
    task = payload.get("task", "")
    lines = [
        f"# Results: {kind} ({task})",
        "",
        "| Cell | AUROC | AUPRC | min(+P, Se) | F1 |",
        "|---|---|---|---|---|",
    ]
    for cell in payload.get("cell_order", sorted(payload.get("cells", {}))):
        agg = payload["cells"][cell]["aggregate"]
        row = [cell] + [
            f"{agg[name]['mean_x100']:.2f}±{agg[name]['std_x100']:.2f}"
            for name in metrics.METRIC_NAMES
        ]
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    lines.append(f"Seeds per cell: {payload.get('n_seeds', 1)}; "
                 f"bootstrap B={payload.get('bootstrap_b', 10)}. Metrics scaled by 100.")
    lines.append("")
    return "\n".join(lines)


def _aggregate_cell(reports: list[metrics.MetricReport]) -> dict:
    """Across-seed aggregate: mean of bootstrap means; std across seeds when
    there are several, else the single bootstrap std."""
    agg = {}
    for name in metrics.METRIC_NAMES:
        means = [r.mean[name] for r in reports]
        if len(reports) > 1:
            std = float(np.std(means, ddof=1))
        else:
            std = reports[0].std[name]
        agg[name] = {
            "mean": float(np.mean(means)),
            "std": std,
            "mean_x100": round(100 * float(np.mean(means)), 2),
            "std_x100": round(100 * std, 2),
        }
    return agg


def _run_training_grid(
    cfg: RunConfig,
    prep: PreparedData,
    out_dir: Path,
    kind: str,
    cells: Sequence[str],
    train_batches: Optional[dict[str, Batch]] = None,
) -> dict:
    """Train every (cell, seed) pair and assemble the consolidated payload.
    ``train_batches`` lets the sparsity sweep substitute per-cell training
    data while reusing val/test."""
    n_features = len(prep.dataset.features)
    cells_dir = out_dir / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    history_rows: list[dict] = []
    payload_cells: dict[str, dict] = {}
    primary_saved = False

    for cell in cells:
        reports = []
        per_seed = {}
        model_cell = "full" if kind == "sparsity" else cell
        model_cfg = variant_model_config(cfg, model_cell, n_features)
        tb = (train_batches or {}).get(cell, prep.batches["train"])
        for k in range(cfg.experiment.n_seeds):
            result, scores, report = train_cell(
                cfg, model_cfg, tb, prep.batches["val"], prep.batches["test"], cell, k
            )
            for row in result.history:
                history_rows.append({"cell": cell, "seed_index": k, **row})
            ckpt = cells_dir / f"{cell}_s{k}.ckpt"
            save_checkpoint(ckpt, result.model, model_cfg.to_dict())
            reports.append(report)
            per_seed[str(k)] = {
                **report.to_dict(),
                "best_epoch": result.best_epoch,
                "val_auroc": result.best_val_auroc,
                "epochs_run": len(result.history),
            }
            is_primary = k == 0 and (cell == "full" or (cell == cells[0] and "full" not in cells))
            if is_primary and not primary_saved:
                save_checkpoint(out_dir / "model.ckpt", result.model, model_cfg.to_dict())
                primary_saved = True
            log.info("cell %-16s seed %d: test AUROC %.4f", cell, k, report.mean["auroc"])
        payload_cells[cell] = {"seeds": per_seed, "aggregate": _aggregate_cell(reports)}

    payload = {
        "kind": kind,
        "task": prep.task,
        "n_seeds": cfg.experiment.n_seeds,
        "bootstrap_b": cfg.experiment.bootstrap_b,
        "cell_order": list(cells),
        "cells": payload_cells,
        "n_patients": {name: len(split) for name, split in zip(("train", "val", "test"), prep.splits)},
    }
    _write_run_files(out_dir, cfg, payload, history_rows, render_table(payload))
    return payload


def run_experiment(kind: str, cfg: RunConfig, out_dir: Optional[str | Path] = None) -> dict:
    """Run one experiment kind end to end; returns the metrics payload
    (also written to the run directory)."""
    if kind not in EXPERIMENT_KINDS:
        raise ExperimentError(f"unknown experiment kind {kind!r} (choose from {EXPERIMENT_KINDS})")
    out = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)

    if kind == "importance":
        return run_importance(cfg, out)

    if kind == "sparsity":
        prep = prepare_data(cfg)
        train_split = prep.splits[0]
        cells = []
        train_batches = {}
        for frac in cfg.experiment.drop_fractions:
            cell = f"drop_{int(round(100 * frac))}"
            cells.append(cell)
            sparse = sparsify_training_set(
                train_split, frac, seed=substream(cfg.seed, f"sparsity/{frac}")
            )
            train_batches[cell] = prep.batch_for(sparse)
        return _run_training_grid(cfg, prep, out, kind, cells, train_batches)

    cells = {
        "main": ("full",),
        "ablate_rag": RAG_ABLATION_CELLS,
        "ablate_fusion": FUSION_ABLATION_CELLS,
    }[kind]
    prep = prepare_data(cfg)
    return _run_training_grid(cfg, prep, out, kind, cells)


def run_importance(cfg: RunConfig, out_dir: Path) -> dict:
    """Permutation-importance analysis over extracted entity sets. The
    cohort is generated with probe entities planted (one label-coupled,
    one label-independent) so the ranking has known anchors."""
    if cfg.data.path is None and not cfg.data.plant_probe_entities:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, plant_probe_entities=True))
    prep = prepare_data(cfg)
    entity_sets = [prep.enhancements[p.id].all_surfaces() for p in prep.dataset.patients]
    labels = prep.dataset.labels(prep.task)

    runs = []
    for k in range(cfg.experiment.importance_runs):
        ranking = entity_importance(
            entity_sets, labels, seed=substream(cfg.seed, f"importance/{k}")
        )
        runs.append({"run": k, "ranking": [[e, imp] for e, imp in ranking]})

    by_entity: dict[str, list[float]] = {}
    for r in runs:
        for e, imp in r["ranking"]:
            by_entity.setdefault(e, []).append(imp)
    mean_rank = sorted(
        ((e, float(np.mean(v))) for e, v in by_entity.items()), key=lambda kv: (-kv[1], kv[0])
    )
    payload = {
        "kind": "importance",
        "task": prep.task,
        "runs": runs,
        "mean_importance": [[e, imp] for e, imp in mean_rank],
        "n_runs": cfg.experiment.importance_runs,
    }
    lines = [
        "# Results: entity importance",
        "",
        "| Entity | Mean importance (AUROC drop) |",
        "|---|---|",
    ]
    for e, imp in mean_rank[:20]:
        lines.append(f"| {e} | {imp:.4f} |")
    lines.append("")
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_files(out_dir, cfg, payload, [], "\n".join(lines))
    return payload
