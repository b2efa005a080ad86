"""Command-line surface.

Subcommands cover the full pipeline (gen-data, build-index, extract,
match, assemble, train, eval) plus the experiment harness (ablate,
sparsity, importance, report). Every command accepts --config FILE with
flag overrides winning over the file; --dry-run validates and prints the
resolved config without touching disk. Exit codes: 0 success, 1 runtime
failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("realm")

_FLAG_MAP = {
    "seed": "seed",
    "out": "out_dir",
    "kg": "kg_path",
    "data": "data.path",
    "n": "data.n_patients",
    "prevalence": "data.prevalence",
    "eta": "thresholds.eta",
    "ts_threshold": "thresholds.eps",
    "dedupe": "thresholds.dedupe",
    "embedder_kind": "embedder.kind",
    "embed_dim": "embedder.dim",
    "cache_dir": "embedder.cache_dir",
    "extractor_kind": "extractor.kind",
    "max_rounds": "extractor.max_rounds",
    "hidden": "model.hidden",
    "heads": "model.heads",
    "fusion": "model.fusion",
    "rag_injection": "model.rag_injection",
    "task": "train.task",
    "batch_size": "train.batch_size",
    "max_epochs": "train.max_epochs",
    "patience": "train.patience",
    "lr": "train.lr",
    "n_seeds": "experiment.n_seeds",
    "bootstrap_b": "experiment.bootstrap_b",
}


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (or file, where noted)")
    p.add_argument("--kg", help="knowledge graph JSONL (default: shipped toy KG)")
    p.add_argument("--data", help="dataset directory to load instead of generating")
    p.add_argument("--n", type=int, help="patients to generate")
    p.add_argument("--prevalence", type=float)
    p.add_argument("--eta", type=float, help="KG match cosine threshold")
    p.add_argument("--ts-threshold", type=float, dest="ts_threshold", help="time-series |z| threshold")
    p.add_argument("--dedupe", type=float, help="semantic dedupe cosine threshold")
    p.add_argument("--embedder-kind", choices=("trigram", "remote"), dest="embedder_kind")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--extractor-kind", choices=("lexicon", "remote"), dest="extractor_kind")
    p.add_argument("--max-rounds", type=int, dest="max_rounds")
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--fusion", choices=("attention", "add", "concat"))
    p.add_argument("--rag-injection", choices=("symmetric", "text_only"), dest="rag_injection")
    p.add_argument("--task", choices=("mortality", "readmission"))
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-seeds", type=int, dest="n_seeds")
    p.add_argument("--bootstrap-b", type=int, dest="bootstrap_b")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="realm",
        description="Retrieval-augmented multimodal EHR prediction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("gen-data", "generate a synthetic cohort into a dataset directory"),
        ("build-index", "embed KG node names into an index file"),
        ("extract", "run both entity-extraction pipelines over a dataset"),
        ("match", "match extracted entities against the KG index"),
        ("assemble", "assemble retrieval texts from matches"),
        ("train", "train and evaluate the configured model"),
        ("eval", "evaluate a checkpoint on a dataset split"),
        ("ablate", "run an ablation grid (rag or fusion)"),
        ("sparsity", "train across training-set drop fractions"),
        ("importance", "permutation importance of extracted entities"),
        ("report", "re-render table.md from a run directory"),
    ):
        p = sub.add_parser(name, help=doc)
        _common_flags(p)
        if name == "ablate":
            p.add_argument("--grid", choices=("rag", "fusion"), default="rag")
        if name == "eval":
            p.add_argument("--ckpt", required=False, help="checkpoint file (default <out>/model.ckpt)")
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
        if name == "report":
            p.add_argument("--run", required=True, help="run directory with metrics.json")
        if name in ("match", "assemble"):
            p.add_argument("--entities", help="entities.jsonl from the extract step")
            p.add_argument("--matches", help="matches.jsonl from the match step")
            p.add_argument("--index", help="node index file from build-index")
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    out = {}
    for flag, dotted in _FLAG_MAP.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[dotted] = value
    return out


def _resolve(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config, _overrides_from_args(args))


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_gen_data(cfg: RunConfig) -> None:
    from .ehr_core import save_dataset
    from .experiments import load_or_generate_dataset

    ds = load_or_generate_dataset(cfg)
    out = save_dataset(ds, cfg.out_dir)
    print(f"wrote {len(ds)} patients to {out}")


def _cmd_build_index(cfg: RunConfig) -> None:
    from .embedding import make_embedder
    from .kg_engine import KnowledgeGraph, build_index, load_toy_kg

    embedder = make_embedder(cfg.embedder.kind, cfg.embedder.dim,
                             cache_dir=cfg.embedder.cache_dir, model_id=cfg.embedder.model_id)
    kg = KnowledgeGraph.load(cfg.kg_path) if cfg.kg_path else load_toy_kg()
    index = build_index(kg, embedder)
    out = Path(cfg.out_dir)
    if out.suffix != ".bin":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "node_index.bin"
    index.save(out)
    print(f"indexed {len(index.node_ids)} nodes ({index.dim} dims) -> {out}")


def _pipeline_pieces(cfg: RunConfig):
    from .embedding import make_embedder
    from .experiments import load_or_generate_dataset, make_extractor
    from .kg_engine import KnowledgeGraph, build_index, load_toy_kg
    from .text_rag import ExtractionConfig

    embedder = make_embedder(cfg.embedder.kind, cfg.embedder.dim,
                             cache_dir=cfg.embedder.cache_dir, model_id=cfg.embedder.model_id)
    kg = KnowledgeGraph.load(cfg.kg_path) if cfg.kg_path else load_toy_kg()
    index = build_index(kg, embedder)
    extractor = make_extractor(cfg)
    ext_cfg = ExtractionConfig(max_rounds=cfg.extractor.max_rounds,
                               dedupe_threshold=cfg.thresholds.dedupe,
                               extractor_kind=cfg.extractor.kind)
    ds = load_or_generate_dataset(cfg)
    return ds, kg, index, embedder, extractor, ext_cfg


def _cmd_extract(cfg: RunConfig) -> None:
    from .text_rag import extract_entities_loop
    from .ts_rag import extract_ts_entities

    ds, _kg, _index, embedder, extractor, ext_cfg = _pipeline_pieces(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "entities.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for p in ds.patients:
            ts_set = extract_ts_entities(p, ds.features, cfg.thresholds.eps)
            joined = "\n".join(n for n in p.notes if n)
            if joined.strip():
                text_set = extract_entities_loop(extractor, embedder, ext_cfg, joined, notes=p.notes).entities
            else:
                from .entities import EntitySet

                text_set = EntitySet()
            for modality, eset in (("ts", ts_set), ("text", text_set)):
                fh.write(json.dumps(
                    {"patient_id": p.id, "modality": modality, "entities": eset.to_dicts()},
                    sort_keys=True) + "\n")
    print(f"wrote {path}")


def _cmd_match(cfg: RunConfig, args: argparse.Namespace) -> None:
    from .embedding import make_embedder
    from .kg_engine import KnowledgeGraph, NodeIndex, build_index, load_toy_kg, match_entity

    embedder = make_embedder(cfg.embedder.kind, cfg.embedder.dim,
                             cache_dir=cfg.embedder.cache_dir, model_id=cfg.embedder.model_id)
    if getattr(args, "index", None):
        index = NodeIndex.load(args.index)
    else:
        kg = KnowledgeGraph.load(cfg.kg_path) if cfg.kg_path else load_toy_kg()
        index = build_index(kg, embedder)
    entities_path = getattr(args, "entities", None) or str(Path(cfg.out_dir) / "entities.jsonl")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "matches.jsonl"
    with open(entities_path, encoding="utf-8") as src, open(path, "w", encoding="utf-8") as fh:
        for line in src:
            if not line.strip():
                continue
            row = json.loads(line)
            matches = []
            for ent in row["entities"]:
                m = match_entity(ent["surface"], index, embedder, cfg.thresholds.eta)
                if m is not None:
                    matches.append([ent["surface"], m[0], m[1]])
            fh.write(json.dumps(
                {"patient_id": row["patient_id"], "modality": row["modality"], "matches": matches},
                sort_keys=True) + "\n")
    print(f"wrote {path}")


def _cmd_assemble(cfg: RunConfig, args: argparse.Namespace) -> None:
    from .kg_engine import KnowledgeGraph, assemble_bundle, load_toy_kg

    kg = KnowledgeGraph.load(cfg.kg_path) if cfg.kg_path else load_toy_kg()
    matches_path = getattr(args, "matches", None) or str(Path(cfg.out_dir) / "matches.jsonl")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bundles.jsonl"
    with open(matches_path, encoding="utf-8") as src, open(path, "w", encoding="utf-8") as fh:
        for line in src:
            if not line.strip():
                continue
            row = json.loads(line)
            bundle = assemble_bundle([tuple(m) for m in row["matches"]], kg, row["modality"])
            fh.write(json.dumps(
                {"patient_id": row["patient_id"], **bundle.to_dict()}, sort_keys=True) + "\n")
    print(f"wrote {path}")


def _cmd_train(cfg: RunConfig) -> None:
    from .experiments import run_experiment

    payload = run_experiment("main", cfg)
    agg = payload["cells"]["full"]["aggregate"]
    print(f"test AUROC {agg['auroc']['mean_x100']:.2f}±{agg['auroc']['std_x100']:.2f} "
          f"-> {cfg.out_dir}")


def _cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> None:
    from .checkpoint import load_checkpoint, restore_model
    from .experiments import prepare_data
    from .model import ModelConfig, RealmModel
    from .training import evaluate

    ckpt_path = getattr(args, "ckpt", None) or str(Path(cfg.out_dir) / "model.ckpt")
    manifest, tensors = load_checkpoint(ckpt_path)
    model_cfg = ModelConfig.from_dict(manifest["config"])
    model = restore_model(RealmModel(model_cfg), tensors)
    prep = prepare_data(cfg)
    batch = prep.batches[getattr(args, "split", "test")]
    _scores, report = evaluate(model, batch, b=cfg.experiment.bootstrap_b,
                               seed=cfg.seed_for("bootstrap/eval"))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_metrics.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report.to_dict()["metrics_x100"], indent=2, sort_keys=True))


def _cmd_report(args: argparse.Namespace) -> None:
    from .experiments import render_table

    run_dir = Path(args.run)
    payload = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    if payload.get("kind") == "importance":
        table = (run_dir / "table.md").read_text(encoding="utf-8")
    else:
        table = render_table(payload)
        (run_dir / "table.md").write_text(table, encoding="utf-8")
    print(table)


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "report":
        try:
            _cmd_report(args)
            return 0
        except Exception as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1

    try:
        cfg = _resolve(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.dry_run:
        print(cfg.to_json(), end="")
        return 0

    try:
        if args.command == "gen-data":
            _cmd_gen_data(cfg)
        elif args.command == "build-index":
            _cmd_build_index(cfg)
        elif args.command == "extract":
            _cmd_extract(cfg)
        elif args.command == "match":
            _cmd_match(cfg, args)
        elif args.command == "assemble":
            _cmd_assemble(cfg, args)
        elif args.command == "train":
            _cmd_train(cfg)
        elif args.command == "eval":
            _cmd_eval(cfg, args)
        elif args.command == "ablate":
            from .experiments import run_experiment

            kind = "ablate_rag" if args.grid == "rag" else "ablate_fusion"
            run_experiment(kind, cfg)
            print(f"wrote {cfg.out_dir}")
        elif args.command == "sparsity":
            from .experiments import run_experiment

            run_experiment("sparsity", cfg)
            print(f"wrote {cfg.out_dir}")
        elif args.command == "importance":
            from .experiments import run_experiment

            run_experiment("importance", cfg)
            print(f"wrote {cfg.out_dir}")
        else:  # pragma: no cover
            parser.error(f"unhandled command {args.command}")
    except Exception as exc:
        log.error("%s", exc)
        return 1
    return 0


def main() -> None:  # console entry point
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
