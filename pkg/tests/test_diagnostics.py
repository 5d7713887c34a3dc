#!/usr/bin/env python3
"""
Unit tests for diagnostics.py module.
"""

import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pytest

from src.base import ConfigurationError, ModelConfig, NumericalError
from src.diagnostics import (
    MAC_CONVENTION, attn_similarity, count_costs, instrumented_costs, probe_similarity,
    similarity_rows, top_fraction_mean, write_cost_report,
)
from src.mmdit import AttentionRecord, VariantTag, attach_variant, init_base
from src.utils.io_utils import load_json
from src.utils.rng import Rng
from tests.fixtures import random_latent, tiny_config, tiny_layout

VARIANTS = ("adapter", "m3", "siam", "siam_lora:2")


def _record(probs, query_spans, key_spans, block=0, head=0):
    return AttentionRecord(block, head, "joint", np.asarray(probs, dtype=np.float64), query_spans, key_spans)


class TestTopFraction(unittest.TestCase):
    """Test cases for the top-fraction reduction."""

    def test_two_hundred_entries(self):
        values = np.arange(200, dtype=np.float64)
        self.assertEqual(top_fraction_mean(values), 198.5)

    def test_small_region_keeps_one_entry(self):
        self.assertEqual(top_fraction_mean(np.array([0.1, 0.7, 0.2])), 0.7)

    def test_empty_region(self):
        with self.assertRaises(ValueError):
            top_fraction_mean(np.array([]))


class TestAttnSimilarity(unittest.TestCase):
    """Test cases for image-to-text and image-to-layout scores."""

    def test_uniform_attention(self):
        k = 8
        probs = np.full((4, k), 1.0 / k)
        record = _record(probs, {"image": (0, 4)}, {"image": (0, 4), "text": (4, 8)})
        similarity = attn_similarity([record])
        self.assertAlmostEqual(similarity.image_text, 1.0 / k)
        self.assertIsNone(similarity.image_layout)

    def test_one_hot_attention(self):
        probs = np.zeros((4, 6))
        probs[:, 5] = 1.0
        record = _record(probs, {"image": (0, 4)}, {"image": (0, 4), "layout": (4, 6)})
        self.assertEqual(attn_similarity([record]).image_layout, 1.0)

    def test_heads_then_blocks(self):
        def one_hot_to(col):
            probs = np.zeros((2, 4))
            probs[:, col] = 1.0
            return probs

        spans = ({"image": (0, 2)}, {"image": (0, 2), "text": (2, 4)})
        records = [
            _record(one_hot_to(2), *spans, block=0, head=0),
            _record(one_hot_to(0), *spans, block=0, head=1),
            _record(one_hot_to(3), *spans, block=1, head=0),
        ]
        similarity = attn_similarity(records)
        self.assertAlmostEqual(similarity.image_text, 0.75)
        self.assertEqual(similarity.per_head[(0, 1)], (0.0, None))

    def test_rows_must_sum_to_one(self):
        record = _record(np.full((2, 4), 0.3), {"image": (0, 2)}, {"text": (2, 4)})
        with self.assertRaises(NumericalError):
            attn_similarity([record])

    def test_records_without_image_queries_are_skipped(self):
        record = _record(np.full((2, 2), 0.3), {"layout": (0, 2)}, {"layout": (0, 2)})
        similarity = attn_similarity([record])
        self.assertIsNone(similarity.image_text)
        self.assertEqual(similarity.per_head, {})

    def test_probe_on_siam(self):
        config = tiny_config()
        weights = attach_variant(init_base(config, Rng(0)), VariantTag.parse("siam"), Rng(1))
        layout = tiny_layout(config, 2)
        similarity = probe_similarity(weights, [(random_latent(config, s), 300, layout) for s in range(2)])
        self.assertIsNotNone(similarity.image_text)
        self.assertIsNotNone(similarity.image_layout)
        self.assertTrue(0.0 < similarity.image_layout <= 1.0)
        rows = similarity_rows([(10, similarity)])
        self.assertEqual(len(rows), config.depth * config.heads)
        self.assertEqual(rows[0]["step"], 10)

    def test_probe_on_base_has_no_layout_score(self):
        config = tiny_config()
        similarity = probe_similarity(init_base(config, Rng(0)), [(random_latent(config), 300, tiny_layout(config))])
        self.assertIsNone(similarity.image_layout)


class TestCostAccounting(unittest.TestCase):
    """Test cases for analytic and instrumented cost counts."""

    def setUp(self):
        self.config = tiny_config()

    def test_analytic_matches_instrumented(self):
        for text in ("base",) + VARIANTS:
            variant = VariantTag.parse(text)
            for entities in (0, 1, 4):
                with self.subTest(variant=text, entities=entities):
                    analytic = count_costs(self.config, variant, entities)
                    measured = instrumented_costs(self.config, variant, entities)
                    self.assertEqual(analytic.base_params, measured.base_params)
                    self.assertEqual(analytic.extra_params, measured.extra_params)
                    self.assertEqual(analytic.base_macs, measured.base_macs)
                    self.assertEqual(analytic.extra_macs, measured.extra_macs)

    @pytest.mark.slow
    def test_analytic_matches_instrumented_at_default_size(self):
        config = ModelConfig()
        self.assertGreaterEqual(config.max_entities, 10)
        for text in ("base", "adapter", "m3", "siam", f"siam_lora:{config.lora_rank}"):
            variant = VariantTag.parse(text)
            for entities in (5, 10):
                with self.subTest(variant=text, entities=entities):
                    analytic = count_costs(config, variant, entities)
                    measured = instrumented_costs(config, variant, entities)
                    self.assertEqual(analytic.to_dict(), measured.to_dict())

    def test_base_costs_nothing_extra(self):
        report = count_costs(self.config, VariantTag.parse("base"), 3)
        self.assertEqual((report.param_ratio, report.mac_ratio), (0.0, 0.0))

    def test_extra_macs_growth_in_entity_count(self):
        config = ModelConfig()
        for text, quadratic in (("adapter", False), ("m3", True), ("siam", True), ("siam_lora:8", True)):
            macs = [count_costs(config, VariantTag.parse(text), n).extra_macs for n in range(1, 6)]
            second = np.diff(macs, n=2)
            with self.subTest(variant=text):
                self.assertEqual(len(set(second.tolist())), 1)
                if quadratic:
                    self.assertGreater(second[0], 0)
                else:
                    self.assertEqual(second[0], 0)

    def test_extra_param_ordering(self):
        config = ModelConfig()
        params = {text: count_costs(config, VariantTag.parse(text), 1).extra_params
                  for text in ("siam_lora:8", "adapter", "m3", "siam")}
        self.assertLess(params["siam_lora:8"], params["adapter"])
        self.assertLess(params["adapter"], params["m3"])
        self.assertLess(params["m3"], params["siam"])

    def test_extra_params_do_not_depend_on_entities(self):
        variant = VariantTag.parse("siam")
        self.assertEqual(count_costs(self.config, variant, 0).extra_params,
                         count_costs(self.config, variant, 4).extra_params)

    def test_entity_count_out_of_range(self):
        with self.assertRaises(ConfigurationError):
            count_costs(self.config, VariantTag.parse("adapter"), 5)
        with self.assertRaises(ConfigurationError):
            count_costs(self.config, VariantTag.parse("adapter"), -1)

    def test_report_file(self):
        temp_dir = tempfile.mkdtemp()
        try:
            path = write_cost_report(Path(temp_dir) / "costs.json",
                                     [count_costs(self.config, VariantTag.parse("m3"), 2)])
            payload = load_json(path)
            self.assertEqual(payload["mac_convention"], MAC_CONVENTION)
            self.assertEqual(payload["reports"][0]["variant"], "m3")
        finally:
            shutil.rmtree(temp_dir, ignore_errors=True)


if __name__ == '__main__':
    unittest.main()
