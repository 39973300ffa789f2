import json
from pathlib import Path

import numpy as np
import pytest

from tbu.acquisition import AcquisitionRequest, select
from tbu.bounding import UncertaintyPartition, load_partition_csv, propose_candidates
from tbu.datapool import PerturbationSpec, PlantedPoolSpec, split_initial, \
    standardize_features
from tbu.errors import BudgetError, ConfigurationError
from tbu.harness import (ExperimentConfig, _aggregate, _select_batch,
                         evaluate_robustness, run_experiment, run_round,
                         summarize_scheduling, format_scheduling_table)
from tbu.model import MlpSpec, TrainConfig, init_params, train_supervised


def small_config(method="tbu", acquisition="entropy", **overrides):
    spec = PlantedPoolSpec(num_classes=3, pool_size=240, val_size=60, test_size=60,
                           core_fraction=0.3, noise_fraction=0.15, flip_p=0.4, seed=21)
    proxy_spec = MlpSpec((8, 8)) if method == "same" else MlpSpec((12,))
    base = dict(
        name=f"{method}-{acquisition}", method=method, acquisition=acquisition,
        rounds=2, initial_labeled=30, budget=15, seeds=(1,), planted=spec,
        proxy_spec=proxy_spec, proxy_train=TrainConfig(epochs=10),
        target_spec=MlpSpec((8, 8)), target_train=TrainConfig(epochs=10),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def initial_pool(config, seed=1):
    from tbu.harness import load_config_dataset
    dataset = load_config_dataset(config)
    pool = split_initial(dataset, config.initial_labeled, config.resolved_val_count(),
                         config.resolved_test_count(), seed)
    return dataset, pool


class TestRunRound:
    def test_same_matches_plain_selection(self):
        config = small_config(method="same")
        dataset, pool = initial_pool(config)
        metrics, new_pool, partition, selected = run_round(config, dataset, pool, 1, 1)
        # replicate the dispatch: one supervised model selects from the full pool
        from dataclasses import replace
        from tbu.harness import _derived_seed
        std = standardize_features(dataset, pool.labeled_idx)
        target = train_supervised(std, pool.labeled_idx, config.target_spec,
                                  replace(config.target_train,
                                          seed=_derived_seed(1, 1, 2)))
        request = AcquisitionRequest("entropy", config.budget, pool.unlabeled_idx,
                                     _derived_seed(1, 1, 3))
        assert np.array_equal(selected, select(target, std, pool, request))
        assert partition is None
        assert metrics.n_le == 0 and metrics.n_ha == 0
        assert metrics.lambda_star is None and metrics.tau is None

    def test_labeled_accounting_and_disjointness(self):
        config = small_config(method="tbu")
        dataset, pool = initial_pool(config)
        for round_index in (1, 2):
            metrics, pool, partition, selected = run_round(
                config, dataset, pool, round_index, 1)
            assert pool.labeled_idx.size == config.initial_labeled \
                + round_index * config.budget
            all_idx = np.concatenate([pool.labeled_idx, pool.unlabeled_idx,
                                      pool.validation_idx, pool.test_idx])
            assert np.unique(all_idx).size == all_idx.size

    def test_tbu_selection_avoids_filtered_rows(self):
        config = small_config(method="tbu")
        dataset, pool = initial_pool(config)
        metrics, _, partition, selected = run_round(config, dataset, pool, 1, 1)
        filtered = np.union1d(partition.low_epistemic, partition.high_aleatoric)
        assert not np.any(np.isin(selected, filtered))
        assert not metrics.backfilled

    def test_percentages_sum_when_disjoint(self):
        config = small_config(method="tbu")
        dataset, pool = initial_pool(config)
        metrics, _, partition, _ = run_round(config, dataset, pool, 1, 1)
        overlap = np.intersect1d(partition.low_epistemic, partition.high_aleatoric)
        if overlap.size == 0:
            pct_cand = 100.0 * metrics.n_cand / pool.unlabeled_idx.size
            assert metrics.pct_le + metrics.pct_ha + pct_cand == pytest.approx(100.0)

    def test_semi_records_thresholds(self):
        config = small_config(method="semi")
        dataset, pool = initial_pool(config)
        metrics, _, partition, _ = run_round(config, dataset, pool, 1, 1)
        assert partition is None
        assert metrics.lambda_star is None
        assert len(metrics.tau) == dataset.num_classes


class TestSelectBatchBackfill:
    def setup_instance(self):
        config = small_config(method="tbu", backfill=True, budget=10)
        dataset, pool = initial_pool(config)
        std = standardize_features(dataset, pool.labeled_idx)
        model = train_supervised(std, pool.labeled_idx, config.target_spec,
                                 config.target_train)
        unl = pool.unlabeled_idx
        partition = propose_candidates(unl, unl[2:40], unl[30:120])
        return config, std, pool, model, partition

    def test_disabled_backfill_raises_with_counts(self):
        config, std, pool, model, partition = self.setup_instance()
        config = small_config(method="tbu", backfill=False, budget=int(1e9))
        with pytest.raises(BudgetError, match="candidates"):
            _select_batch(config, model, std, pool, partition.candidates[:3],
                          partition, acq_seed=0)

    def test_backfill_draws_from_ha_then_le(self):
        config, std, pool, model, partition = self.setup_instance()
        few_candidates = partition.candidates[:4]
        selected, backfilled = _select_batch(config, model, std, pool,
                                             few_candidates, partition, acq_seed=0)
        assert backfilled
        assert selected.size == config.budget
        assert np.unique(selected).size == selected.size
        assert np.all(np.isin(few_candidates, selected))
        extras = np.setdiff1d(selected, few_candidates)
        ha = partition.high_aleatoric
        le_only = np.setdiff1d(partition.low_epistemic, ha)
        # 6 extras must come from HA first (HA is large enough here)
        assert np.all(np.isin(extras, np.union1d(ha, le_only)))
        assert np.isin(extras, ha).sum() == extras.size

    def test_backfill_uses_le_when_ha_exhausted(self):
        config, std, pool, model, _ = self.setup_instance()
        unl = pool.unlabeled_idx
        partition = propose_candidates(unl, unl[:40], unl[40:43])
        selected, backfilled = _select_batch(config, model, std, pool,
                                             partition.candidates[:2], partition,
                                             acq_seed=0)
        assert backfilled and selected.size == config.budget
        extras = np.setdiff1d(selected, partition.candidates[:2])
        assert np.isin(extras, partition.high_aleatoric).sum() == 3
        assert np.isin(extras, partition.low_epistemic).sum() == 5


class TestRunExperiment:
    def test_single_seed_single_round(self, tmp_path):
        config = small_config(rounds=1, seeds=(3,))
        report = run_experiment(config, tmp_path)
        assert not report["partial"]
        assert len(report["per_seed"]) == 1
        assert len(report["per_seed"][0]["rounds"]) == 1
        summary = tmp_path / "runs" / config.name / "summary.json"
        assert summary.exists()

    def test_output_layout_and_partition_files(self, tmp_path):
        config = small_config(rounds=2, seeds=(1,))
        run_experiment(config, tmp_path)
        base = tmp_path / "runs" / config.name / "seed_1"
        for round_index in (1, 2):
            round_dir = base / f"round_{round_index}"
            assert (round_dir / "metrics.json").exists()
            assert (round_dir / "selected_indices.csv").exists()
            buckets = load_partition_csv(round_dir / "partition.csv")
            selected = [int(line) for line in
                        (round_dir / "selected_indices.csv").read_text().split()]
            assert len(selected) == config.budget
            assert all(buckets[i] == "CAND" for i in selected)

    def test_rerun_is_identical_apart_from_wall_time(self, tmp_path):
        config = small_config(rounds=2, seeds=(1, 2))
        run_experiment(config, tmp_path / "a")
        run_experiment(config, tmp_path / "b")
        base_a = tmp_path / "a" / "runs" / config.name
        base_b = tmp_path / "b" / "runs" / config.name
        files_a = sorted(p.relative_to(base_a) for p in base_a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(base_b) for p in base_b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            a, b = base_a / rel, base_b / rel
            if rel.name == "metrics.json":
                da, db = json.loads(a.read_text()), json.loads(b.read_text())
                da.pop("wall_ms"), db.pop("wall_ms")
                assert da == db
            elif rel.name == "summary.json":
                da, db = json.loads(a.read_text()), json.loads(b.read_text())
                for doc in (da, db):
                    for rec in doc["per_seed"]:
                        for metrics in rec["rounds"]:
                            metrics.pop("wall_ms")
                assert da == db
            else:
                assert a.read_bytes() == b.read_bytes()

    def test_aggregate_of_identical_values_has_zero_std(self):
        record = {"seed": 1, "status": "ok", "error": None,
                  "rounds": [{"accuracy": 0.5, "pct_le": 1.0, "pct_ha": 2.0,
                              "n_cand": 7}]}
        twin = dict(record, seed=2)
        rows = _aggregate([record, twin], 1)
        assert rows[0]["accuracy_mean"] == 0.5
        assert rows[0]["accuracy_std"] == 0.0

    def test_seed_failure_marks_partial(self, tmp_path):
        # budget larger than the pool fails every round 1
        config = small_config(rounds=1, seeds=(1,), budget=100000)
        report = run_experiment(config, tmp_path)
        assert report["partial"]
        assert report["per_seed"][0]["status"] == "error"
        assert "candidates" in report["per_seed"][0]["error"]


class TestEvaluateRobustness:
    def test_severity_zero_equals_clean_exactly(self, tiny_model):
        std, pool, params = tiny_model
        table = evaluate_robustness(params, std, pool.test_idx,
                                    ("noise", "scale", "offset"),
                                    PerturbationSpec(), np.random.default_rng(0))
        from tbu.model import evaluate_accuracy
        clean = evaluate_accuracy(params, std, pool.test_idx)
        for kind in ("noise", "scale", "offset"):
            assert table[kind]["0"] == clean
            assert set(table[kind]) == {"0", "1", "2", "3", "4", "5"}

    def test_constant_prediction_model_is_corruption_invariant(self, tiny_model):
        std, pool, _ = tiny_model
        zero = init_params(MlpSpec(()), std.n_features, std.num_classes,
                           np.random.default_rng(0))
        table = evaluate_robustness(zero, std, pool.test_idx, ("scale", "offset"),
                                    PerturbationSpec(), np.random.default_rng(0))
        for kind in ("scale", "offset"):
            assert len(set(table[kind].values())) == 1

    def test_unknown_corruption_rejected(self, tiny_model):
        std, pool, params = tiny_model
        with pytest.raises(ConfigurationError):
            evaluate_robustness(params, std, pool.test_idx, ("fog",),
                                PerturbationSpec(), np.random.default_rng(0))


class TestSummarizeScheduling:
    def fake_report(self, pct_le_rounds, pct_ha_rounds, method="tbu",
                    acquisition="entropy"):
        rounds = [{"round": i + 1, "pct_le": le, "pct_ha": ha, "accuracy": 0.5,
                   "n_cand": 10}
                  for i, (le, ha) in enumerate(zip(pct_le_rounds, pct_ha_rounds))]
        return {"method": method, "acquisition": acquisition, "name": "x",
                "rounds": len(pct_le_rounds),
                "per_seed": [{"seed": 1, "status": "ok", "rounds": rounds}]}

    def test_single_round_single_row(self):
        rows = summarize_scheduling(self.fake_report([4.0], [9.0]))
        assert len(rows) == 1
        assert rows[0]["entropy_le_mean"] == 4.0
        assert rows[0]["entropy_ha_mean"] == 9.0

    def test_zero_instances_yield_zero_entries(self):
        rows = summarize_scheduling(self.fake_report([0.0], [0.0]))
        assert rows[0]["entropy_le_mean"] == 0.0
        assert rows[0]["entropy_ha_std"] == 0.0

    def test_non_tbu_rejected(self):
        with pytest.raises(ConfigurationError):
            summarize_scheduling(self.fake_report([1.0], [1.0], method="same"))

    def test_format_renders_all_rounds(self):
        rows = summarize_scheduling(self.fake_report([4.0, 6.0], [9.0, 5.0]))
        text = format_scheduling_table(rows)
        assert len(text.splitlines()) == 3


class TestConfigValidation:
    def test_same_requires_matching_specs(self):
        with pytest.raises(ConfigurationError):
            small_config(method="same", proxy_spec=MlpSpec((64,)))

    def test_needs_exactly_one_source(self):
        with pytest.raises(ConfigurationError):
            small_config(planted=None)

    def test_csv_source_needs_counts(self):
        with pytest.raises(ConfigurationError):
            small_config(planted=None, csv_path="x.csv")
