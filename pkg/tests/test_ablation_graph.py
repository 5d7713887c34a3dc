#!/usr/bin/env python3
"""
Unit tests for ablation_graph.py module.
"""

import shutil
import tempfile
import unittest
from pathlib import Path

import pytest

from src.ablation_graph import (
    BASE_CHECKPOINT, ablate_strategies, cell_seed, censored_steps, initial_state, route_after_data,
    run_ablation, strategy_conditions,
)
from src.base import ConfigurationError, ExperimentConfig
from src.utils.io_utils import load_json, read_csv
from tests.fixtures import tiny_config, tiny_train_config


def _experiment(out_dir, **overrides):
    values = dict(name="tiny", out_dir=str(out_dir), variants=["adapter"], seeds=1, base_seed=0,
                  train_scenes=4, eval_scenes=2, pretrain_steps=1, layout_steps=2, sample_steps=2,
                  strategy_eval_interval=1, strategy_eval_scenes=2, jobs=1)
    values.update(overrides)
    return ExperimentConfig(**values)


class TestExperimentConfig(unittest.TestCase):
    """Test cases for experiment configuration and helpers."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_validation(self):
        with self.assertRaises(ConfigurationError):
            _experiment(self.temp_dir, variants=[])
        with self.assertRaises(ConfigurationError):
            _experiment(self.temp_dir, name="a/b")
        with self.assertRaises(ConfigurationError):
            _experiment(self.temp_dir, strategy_lambdas=[-1.0])

    def test_seed_list(self):
        self.assertEqual(_experiment(self.temp_dir, seeds=3, base_seed=10).seed_list, [10, 11, 12])

    def test_strategy_grid(self):
        conditions = strategy_conditions(_experiment(self.temp_dir))
        self.assertEqual([c[0] for c in conditions],
                         ["bias=on,lambda=0", "bias=on,lambda=2", "bias=off,lambda=0", "bias=off,lambda=2"])

    def test_cell_seeds(self):
        self.assertEqual(cell_seed(0, "adapter"), cell_seed(0, "adapter"))
        self.assertNotEqual(cell_seed(0, "adapter"), cell_seed(0, "siam"))
        self.assertNotEqual(cell_seed(0, "adapter"), cell_seed(1, "adapter"))

    def test_unreached_runs_are_censored(self):
        cfg = _experiment(self.temp_dir, layout_steps=100, strategy_eval_interval=25)
        self.assertEqual(censored_steps({"reached": True, "steps_to_threshold": 50}, cfg), 50)
        self.assertEqual(censored_steps({"reached": False, "steps_to_threshold": None}, cfg), 125)

    def test_route_reuses_existing_base(self):
        state = initial_state(_experiment(self.temp_dir), tiny_config(), tiny_train_config(), "variants")
        self.assertEqual(route_after_data(state), "pretrain")
        checkpoint = state["experiment_dir"] / "base" / BASE_CHECKPOINT
        checkpoint.parent.mkdir(parents=True)
        checkpoint.write_bytes(b"")
        self.assertEqual(route_after_data(state), "reuse")


@pytest.mark.slow
class TestAblationRuns(unittest.TestCase):
    """Tiny end-to-end ablations."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_variant_ablation(self):
        cfg = _experiment(self.temp_dir, variants=["adapter", "siam_lora:2"])
        report = run_ablation(cfg, tiny_config(), tiny_train_config(diagnostic_interval=1))
        exp_dir = self.temp_dir / "tiny"
        self.assertEqual({r["variant"] for r in report["ordering"]}, {"adapter", "siam_lora:2", "chance"})
        for name in ("benchmark.csv", "ordering.csv", "similarity.svg", "report.md", "report.html",
                     "manifest.json"):
            self.assertTrue((exp_dir / name).exists(), name)
        self.assertTrue((exp_dir / "siam_lora-2" / "0" / "layout.ckpt").exists())
        self.assertEqual(len(read_csv(exp_dir / "benchmark.csv")), 3)

        checkpoint = exp_dir / "base" / BASE_CHECKPOINT
        modified = checkpoint.stat().st_mtime_ns
        run_ablation(cfg, tiny_config(), tiny_train_config())
        self.assertEqual(checkpoint.stat().st_mtime_ns, modified)

    def test_strategy_ablation(self):
        cfg = _experiment(self.temp_dir, strategy_variant="adapter", strategy_target=0.0)
        report = ablate_strategies(cfg, tiny_config(), tiny_train_config())
        self.assertEqual(len(report["summary"]), 4)
        for run in report["runs"]:
            self.assertTrue(run["reached"])
            self.assertEqual(run["steps_to_threshold"], 1)
        for row in report["summary"]:
            self.assertEqual(row["median_steps"], 1.0)
        manifest = load_json(self.temp_dir / "tiny" / "strategies" / "manifest.json")
        self.assertEqual(manifest["command"], "ablate --strategies")


if __name__ == '__main__':
    unittest.main()
