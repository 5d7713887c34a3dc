#!/usr/bin/env python3
"""
Unit tests for scenes.py module.
"""

import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy import ndimage

from src.base import DatasetError, ModelConfig, OracleConfig
from src.encoders import BBox, EntityDocument, LayoutDocument, Vocabulary
from src.mmdit import init_base
from src.scenes import (
    BACKGROUND_COLORS, EVAL_SEED_OFFSET, SceneEntity, SceneSpec, benchmark, build_dataset,
    chance_baseline, check_disjoint, gen_scene, generate, load_dataset, oracle_eval, render_scene,
    score_images, split_seeds,
)
from src.utils.rng import Rng
from tests.fixtures import tiny_config


def _foreground(spec: SceneSpec, image: np.ndarray) -> np.ndarray:
    background = np.array(BACKGROUND_COLORS[spec.background])[:, None, None] / 255.0
    return np.any(image != background, axis=0)


class TestSceneGenerator(unittest.TestCase):
    """Test cases for scene generation and rendering."""

    def test_same_seed_same_scene(self):
        spec_a, image_a = gen_scene(42)
        spec_b, image_b = gen_scene(42)
        self.assertEqual(spec_a, spec_b)
        np.testing.assert_array_equal(image_a, image_b)

    def test_red_square_pixels(self):
        spec = SceneSpec(0, "black", [SceneEntity("square", "red", BBox(0.25, 0.25, 0.75, 0.75))])
        image = render_scene(spec, 32)
        box = image[:, 8:24, 8:24]
        red = (box[0] == 1.0) & (box[1] == 0.0) & (box[2] == 0.0)
        self.assertGreaterEqual(red.mean(), 0.95)

    def test_component_count_matches_entities(self):
        for seed in range(30):
            spec, image = gen_scene(seed)
            _, count = ndimage.label(_foreground(spec, image), structure=np.ones((3, 3)))
            with self.subTest(seed=seed):
                self.assertEqual(count, len(spec.entities))
                self.assertTrue(1 <= len(spec.entities) <= 4)

    def test_boxes_snap_to_patch_grid(self):
        for seed in range(10):
            spec, _ = gen_scene(seed, image_size=32, patch_size=2)
            for entity in spec.entities:
                for v in entity.bbox.as_tuple():
                    self.assertAlmostEqual(v * 16, round(v * 16))

    def test_caption_uses_vocabulary(self):
        vocab = Vocabulary.default()
        for seed in range(10):
            spec, _ = gen_scene(seed)
            vocab.encode(spec.caption, 16)
            for entity in spec.entities:
                vocab.encode(entity.caption, 4)


class TestOracle(unittest.TestCase):
    """Test cases for the pixel oracle."""

    def test_ground_truth_scores_all_hits(self):
        for seed in range(40):
            spec, image = gen_scene(seed)
            report = oracle_eval(image, spec.to_document())
            with self.subTest(seed=seed):
                self.assertEqual((report.spatial, report.color, report.shape), (1.0, 1.0, 1.0))

    def test_blank_image_scores_zero(self):
        spec, _ = gen_scene(3)
        report = oracle_eval(np.zeros((3, 32, 32)), spec.to_document())
        self.assertEqual((report.spatial, report.color, report.shape), (0.0, 0.0, 0.0))

    def test_wrong_color_and_shape(self):
        box = BBox(0.25, 0.25, 0.75, 0.75)
        image = render_scene(SceneSpec(0, "black", [SceneEntity("circle", "red", box)]), 32)
        report = oracle_eval(image, LayoutDocument("blue square", [EntityDocument("a blue square", box)]))
        self.assertEqual((report.spatial, report.color, report.shape), (1.0, 0.0, 0.0))

    def test_misplaced_entity_misses(self):
        image = render_scene(SceneSpec(0, "gray", [SceneEntity("square", "green", BBox(0.0, 0.0, 0.25, 0.25))]), 32)
        document = LayoutDocument("green square", [EntityDocument("a green square", BBox(0.5, 0.5, 1.0, 1.0))])
        self.assertEqual(oracle_eval(image, document).spatial, 0.0)

    def test_stricter_fill_never_raises_rates(self):
        spec, image = gen_scene(5)
        noisy = np.clip(image + np.random.default_rng(0).normal(scale=0.2, size=image.shape), 0.0, 1.0)
        loose = oracle_eval(noisy, spec.to_document(), OracleConfig(min_fill=0.1))
        strict = oracle_eval(noisy, spec.to_document(), OracleConfig(min_fill=0.9))
        self.assertLessEqual(strict.spatial, loose.spatial)

    def test_empty_layout_rates_are_zero(self):
        report = oracle_eval(np.zeros((3, 8, 8)), LayoutDocument("scene", []))
        self.assertEqual(report.spatial, 0.0)


class TestDatasets(unittest.TestCase):
    """Test cases for dataset files and seed splits."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.config = ModelConfig(image_size=32, patch_size=2, precision="float64")

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_split_seeds_are_disjoint(self):
        train = split_seeds("train", 100)
        evaluation = split_seeds("eval", 100)
        self.assertEqual(evaluation[0], EVAL_SEED_OFFSET)
        check_disjoint(train, evaluation)
        with self.assertRaises(DatasetError):
            check_disjoint(train, [5])

    def test_round_trip(self):
        dataset, written = build_dataset(self.temp_dir, "train", [0, 1, 2], self.config, jobs=2)
        self.assertTrue(all(path.exists() for path in written))
        loaded = load_dataset(self.temp_dir, self.config)
        self.assertEqual(loaded.seeds, [0, 1, 2])
        self.assertEqual(loaded.split, "train")
        for original, restored in zip(dataset.samples, loaded.samples):
            np.testing.assert_allclose(original.image, restored.image, atol=1e-6)
            self.assertEqual(original.document, restored.document)
            np.testing.assert_array_equal(original.layout.caption_ids, restored.layout.caption_ids)

    def test_missing_manifest(self):
        with self.assertRaises(DatasetError):
            load_dataset(Path(self.temp_dir) / "absent", self.config)

    def test_wrong_image_size(self):
        build_dataset(self.temp_dir, "train", [0], self.config)
        with self.assertRaises(DatasetError):
            load_dataset(self.temp_dir, ModelConfig(image_size=16, patch_size=2))


class TestBenchmark(unittest.TestCase):
    """Test cases for the benchmark table."""

    def setUp(self):
        self.config = tiny_config()
        self.eval_set = generate(split_seeds("eval", 2), Vocabulary.default(), self.config, "eval")
        self.base = init_base(self.config, Rng(0)).randomized(Rng(1), std=0.1)

    def test_ground_truth_upper_bound(self):
        config = ModelConfig(image_size=32, patch_size=2)
        dataset = generate(split_seeds("eval", 5), Vocabulary.default(), config, "eval")
        report = score_images([(s.image, s.document) for s in dataset.samples])
        self.assertEqual((report.spatial, report.color, report.shape), (1.0, 1.0, 1.0))

    def test_rerun_is_identical(self):
        a = benchmark(self.base, self.eval_set, 2, [0, 1])
        b = benchmark(self.base, self.eval_set, 2, [0, 1], jobs=2)
        self.assertEqual(a.rows, b.rows)
        self.assertEqual([r["seed"] for r in a.rows], [0, 1])

    def test_overlapping_training_seeds_rejected(self):
        with self.assertRaises(DatasetError):
            benchmark(self.base, self.eval_set, 2, [0], training_seeds=self.eval_set.seeds)

    def test_chance_label(self):
        table = chance_baseline(self.base, self.eval_set, 2, [0])
        self.assertEqual(table.rows[0]["variant"], "chance")
        self.assertIn("spatial", table.mean("chance"))


if __name__ == '__main__':
    unittest.main()
