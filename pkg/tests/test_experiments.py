import json

import numpy as np
import pytest

from realm.config import config_from_dict
from realm.experiments import (
    EXPERIMENT_KINDS,
    ExperimentError,
    FUSION_ABLATION_CELLS,
    RAG_ABLATION_CELLS,
    entity_importance,
    run_experiment,
)


def small_cfg(tmp_path, **extra):
    tree = {
        "data": {"n_patients": 120, "t_min": 3, "t_max": 5},
        "thresholds": {"eta": 0.6},
        "model": {"hidden": 16, "heads": 2, "ffn_mult": 2},
        "train": {"batch_size": 32, "max_epochs": 2, "patience": 2, "lr": 1e-3},
        "experiment": {"n_seeds": 1, "bootstrap_b": 5},
        "embedder": {"dim": 64},
        "out_dir": str(tmp_path / "run"),
        "seed": 5,
    }
    for key, value in extra.items():
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return config_from_dict(tree)


class TestEntityImportance:
    def test_perfect_predictor_ranks_first_with_positive_importance(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 2, size=400)
        sets = []
        for y in labels:
            row = ["anchor disease"] if y else []
            if rng.random() < 0.5:
                row.append("noise one")
            if rng.random() < 0.5:
                row.append("noise two")
            sets.append(row)
        ranking = entity_importance(sets, labels, seed=1)
        assert ranking[0][0] == "anchor disease"
        assert ranking[0][1] > 0

    def test_label_independent_entity_has_near_zero_importance(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 2, size=1000)
        sets = []
        for y in labels:
            row = []
            if y and rng.random() < 0.8:
                row.append("real signal")
            if rng.random() < 0.3:
                row.append("independent term")
            sets.append(row)
        ranking = dict(entity_importance(sets, labels, seed=2))
        assert abs(ranking["independent term"]) < 0.05

    def test_duplicated_columns_share_credit_within_2x(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 2, size=600)
        sets = []
        for y in labels:
            row = []
            if y and rng.random() < 0.7:
                row += ["twin a", "twin b"]  # always co-occur
            if rng.random() < 0.4:
                row.append("background")
            sets.append(row)
        ranking = dict(entity_importance(sets, labels, seed=3))
        a, b = ranking["twin a"], ranking["twin b"]
        assert a > 0 and b > 0
        assert max(a, b) <= 2 * min(a, b)

    def test_needs_two_distinct_entities(self):
        with pytest.raises(ExperimentError, match="distinct"):
            entity_importance([["only"], ["only"]], [0, 1], seed=0)

    def test_degenerate_constant_matrix_rejected(self):
        sets = [["a", "b"], ["a", "b"], ["a", "b"]]
        with pytest.raises(ExperimentError, match="degenerate"):
            entity_importance(sets, [0, 1, 0], seed=0)

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 2, size=200)
        sets = [["x"] if y else ["y"] for y in labels]
        assert entity_importance(sets, labels, seed=9) == entity_importance(sets, labels, seed=9)


class TestRunExperiment:
    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(ExperimentError):
            run_experiment("mystery", small_cfg(tmp_path))

    def test_rag_ablation_grid_has_exactly_five_rows(self, tmp_path):
        cfg = small_cfg(tmp_path)
        payload = run_experiment("ablate_rag", cfg)
        assert payload["cell_order"] == list(RAG_ABLATION_CELLS)
        assert len(payload["cells"]) == 5
        run = tmp_path / "run"
        for name in ("config.json", "history.jsonl", "metrics.json", "model.ckpt", "table.md"):
            assert (run / name).exists(), name
        table = (run / "table.md").read_text()
        for cell in RAG_ABLATION_CELLS:
            assert cell in table

    def test_fusion_grid_cells(self, tmp_path):
        payload = run_experiment("ablate_fusion", small_cfg(tmp_path))
        assert payload["cell_order"] == list(FUSION_ABLATION_CELLS)

    def test_sparsity_runs_five_points(self, tmp_path):
        payload = run_experiment("sparsity", small_cfg(tmp_path))
        assert payload["cell_order"] == ["drop_0", "drop_20", "drop_40", "drop_60", "drop_80"]
        assert len(payload["cells"]) == 5

    def test_main_writes_primary_checkpoint(self, tmp_path):
        from realm.checkpoint import load_checkpoint

        cfg = small_cfg(tmp_path)
        payload = run_experiment("main", cfg)
        assert list(payload["cells"]) == ["full"]
        manifest, tensors = load_checkpoint(tmp_path / "run" / "model.ckpt")
        assert manifest["config"]["fusion"] == "attention"
        assert tensors

    def test_history_rows_tagged_by_cell_and_seed(self, tmp_path):
        cfg = small_cfg(tmp_path)
        run_experiment("main", cfg)
        rows = [
            json.loads(line)
            for line in (tmp_path / "run" / "history.jsonl").read_text().splitlines()
        ]
        assert rows
        assert all({"cell", "seed_index", "epoch", "train_loss", "val_auroc"} <= set(r) for r in rows)

    def test_same_config_and_seed_byte_identical_outputs(self, tmp_path):
        cfg_a = small_cfg(tmp_path / "a")
        cfg_b = small_cfg(tmp_path / "b")
        run_experiment("main", cfg_a)
        run_experiment("main", cfg_b)
        for name in ("metrics.json", "model.ckpt", "history.jsonl"):
            assert (tmp_path / "a" / "run" / name).read_bytes() == (
                tmp_path / "b" / "run" / name
            ).read_bytes(), name

    def test_metrics_json_includes_x100_mirrors(self, tmp_path):
        cfg = small_cfg(tmp_path)
        run_experiment("main", cfg)
        payload = json.loads((tmp_path / "run" / "metrics.json").read_text())
        seed_block = payload["cells"]["full"]["seeds"]["0"]
        assert "metrics_x100" in seed_block
        m, m100 = seed_block["metrics"], seed_block["metrics_x100"]
        assert m100["auroc"]["mean"] == pytest.approx(100 * m["auroc"]["mean"], abs=0.005)

    def test_importance_experiment_payload(self, tmp_path):
        cfg = small_cfg(tmp_path, **{"data.n_patients": 150, "experiment.importance_runs": 2})
        payload = run_experiment("importance", cfg)
        assert payload["kind"] == "importance"
        assert len(payload["runs"]) == 2
        entities = [e for e, _imp in payload["mean_importance"]]
        from realm.ehr_core import PROBE_PREDICTIVE_TERM

        assert PROBE_PREDICTIVE_TERM in entities

    def test_experiment_kinds_constant(self):
        assert set(EXPERIMENT_KINDS) == {"main", "ablate_rag", "ablate_fusion", "sparsity", "importance"}
