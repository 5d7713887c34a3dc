#!/usr/bin/env python3
"""
Unit tests for layoutkit.py module.
"""

import unittest

import numpy as np

from src.base import LayoutError, LayoutRulesConfig, ModelConfig
from src.encoders import BBox, EntityDocument, LayoutDocument
from src.layoutkit import (
    DATASET_MODE, FORMAT_MODE, RULE_BOUNDS, RULE_CORNER_ORDER, RULE_COUNT, RULE_MIN_AREA, CoarseInput,
    convert_document, mask_to_bbox, point_to_bbox, scribble_to_bbox, suite_accuracy, validate,
)
from src.scenes import gen_scene


def _assert_box(test, box, expected):
    for got, want in zip(box.as_tuple(), expected):
        test.assertAlmostEqual(got, want, places=12)


def _document(boxes):
    return LayoutDocument("scene", [EntityDocument("a red circle", b) for b in boxes])


class TestValidate(unittest.TestCase):
    """Test cases for layout validation."""

    def test_corner_order(self):
        report = validate([BBox(0.5, 0.5, 0.4, 0.9)])
        self.assertFalse(report.valid)
        self.assertEqual(report.entities[0].violations, [RULE_CORNER_ORDER])

    def test_out_of_bounds(self):
        report = validate([BBox(-0.1, 0.0, 0.5, 0.5)])
        self.assertIn(RULE_BOUNDS, report.entities[0].violations)

    def test_min_area_only_in_dataset_mode(self):
        tiny = [BBox(0.0, 0.0, 0.1, 0.1)] * 3
        self.assertTrue(validate(tiny, FORMAT_MODE).valid)
        report = validate(tiny, DATASET_MODE)
        self.assertFalse(report.valid)
        self.assertEqual(report.entities[0].violations, [RULE_MIN_AREA])

    def test_entity_count(self):
        boxes = [BBox(0.0, 0.0, 0.5, 0.5)] * 11
        self.assertTrue(validate(boxes, FORMAT_MODE).valid)
        report = validate(boxes, DATASET_MODE)
        self.assertEqual(report.layout_violations, [RULE_COUNT])
        self.assertEqual(report.accuracy, 0.0)

    def test_accuracy_counts_valid_entities(self):
        report = validate([BBox(0.0, 0.0, 0.5, 0.5), BBox(0.6, 0.6, 0.5, 0.9)])
        self.assertEqual(report.accuracy, 0.5)
        self.assertEqual(report.violations(), [f"entity 1: {RULE_CORNER_ORDER}"])

    def test_document_input_and_report_dict(self):
        report = validate(_document([BBox(0.0, 0.0, 1.0, 1.0)]))
        self.assertEqual(report.to_dict(), {"mode": FORMAT_MODE, "valid": True, "accuracy": 1.0,
                                             "violations": []})

    def test_unknown_mode(self):
        with self.assertRaises(ValueError):
            validate([], "strict")

    def test_suite_accuracy(self):
        reports = [validate([BBox(0.0, 0.0, 0.5, 0.5)]), validate([BBox(0.5, 0.5, 0.4, 0.9)])]
        self.assertEqual(suite_accuracy(reports), 0.5)
        self.assertEqual(suite_accuracy([]), 0.0)

    def test_generated_scenes_pass_dataset_rules(self):
        rules = LayoutRulesConfig(min_count=1, max_count=4)
        config = ModelConfig()
        for seed in range(50):
            spec, _ = gen_scene(seed, config.image_size, config.patch_size)
            with self.subTest(seed=seed):
                self.assertTrue(validate(spec.to_document(), DATASET_MODE, rules).valid)


class TestMaskToBox(unittest.TestCase):
    """Test cases for mask conversion."""

    def test_full_mask(self):
        _assert_box(self, mask_to_bbox(np.ones((4, 4))), (0.0, 0.0, 1.0, 1.0))

    def test_single_cell(self):
        mask = np.zeros((4, 8))
        mask[1, 2] = 1
        _assert_box(self, mask_to_bbox(mask), (2 / 8, 1 / 4, 3 / 8, 2 / 4))

    def test_random_masks_match_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            mask = rng.random((6, 5)) < 0.2
            if not mask.any():
                continue
            cells = [(r, c) for r in range(6) for c in range(5) if mask[r, c]]
            expected = (min(c for _, c in cells) / 5, min(r for r, _ in cells) / 6,
                        (max(c for _, c in cells) + 1) / 5, (max(r for r, _ in cells) + 1) / 6)
            _assert_box(self, mask_to_bbox(mask), expected)

    def test_empty_mask(self):
        with self.assertRaises(LayoutError):
            mask_to_bbox(np.zeros((3, 3)))
        with self.assertRaises(LayoutError):
            mask_to_bbox(np.ones(4))


class TestScribbleAndPoint(unittest.TestCase):
    """Test cases for scribble and point conversion."""

    def test_scribble_extent(self):
        _assert_box(self, scribble_to_bbox([(0.3, 0.3), (0.6, 0.7)]), (0.25, 0.25, 0.65, 0.75))

    def test_scribble_clamped(self):
        _assert_box(self, scribble_to_bbox([(0.0, 0.02), (1.0, 0.5)]), (0.0, 0.0, 1.0, 0.55))

    def test_scribble_needs_two_points(self):
        with self.assertRaises(LayoutError):
            scribble_to_bbox([(0.5, 0.5)])
        with self.assertRaises(LayoutError):
            scribble_to_bbox([(0.5, 0.5), (1.2, 0.5)])

    def test_point_centered(self):
        _assert_box(self, point_to_bbox((0.5, 0.5), 0.2), (0.4, 0.4, 0.6, 0.6))

    def test_point_in_corner_shifts_inward(self):
        _assert_box(self, point_to_bbox((0.0, 0.0), 0.2), (0.0, 0.0, 0.2, 0.2))
        _assert_box(self, point_to_bbox((1.0, 0.95), 0.2), (0.8, 0.8, 1.0, 1.0))

    def test_point_out_of_range(self):
        with self.assertRaises(LayoutError):
            point_to_bbox((1.5, 0.5))
        with self.assertRaises(LayoutError):
            point_to_bbox((0.5, 0.5), 0.0)


class TestConvertDocument(unittest.TestCase):
    """Test cases for coarse layout documents."""

    def test_mixed_record(self):
        payload = {
            "caption": "red circle and blue square on black",
            "entities": [
                {"caption": "a red circle", "point": [0.5, 0.5]},
                {"caption": "a blue square", "scribble": [[0.3, 0.3], [0.6, 0.7]]},
                {"caption": "a green triangle", "mask": [[0, 1], [0, 1]]},
                {"caption": "a yellow circle", "bbox": [0.0, 0.0, 0.25, 0.25]},
            ],
        }
        document = convert_document(payload)
        self.assertEqual(document.caption, payload["caption"])
        self.assertEqual([e.caption for e in document.entities], [e["caption"] for e in payload["entities"]])
        _assert_box(self, document.entities[2].bbox, (0.5, 0.0, 1.0, 1.0))
        self.assertTrue(validate(document, FORMAT_MODE).valid)

    def test_point_size_from_rules(self):
        payload = {"caption": "scene", "entities": [{"caption": "a red circle", "point": [0.5, 0.5]}]}
        document = convert_document(payload, rules=LayoutRulesConfig(point_size=0.4))
        _assert_box(self, document.entities[0].bbox, (0.3, 0.3, 0.7, 0.7))

    def test_kind_filter(self):
        payload = {"caption": "scene", "entities": [{"caption": "a red circle", "point": [0.5, 0.5]}]}
        with self.assertRaises(LayoutError):
            convert_document(payload, kind="mask")

    def test_ambiguous_entity(self):
        record = {"caption": "a red circle", "point": [0.5, 0.5], "scribble": [[0.1, 0.1], [0.2, 0.2]]}
        with self.assertRaises(LayoutError):
            CoarseInput.from_entity(record)

    def test_missing_caption(self):
        with self.assertRaises(LayoutError):
            convert_document({"entities": []})

    def test_unknown_kind(self):
        with self.assertRaises(LayoutError):
            CoarseInput("lasso")


if __name__ == '__main__':
    unittest.main()
