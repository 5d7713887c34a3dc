#!/usr/bin/env python3
"""
Unit tests for diffusion.py module.
"""

import math
import unittest

import numpy as np
import pytest
from scipy.stats import norm

from src.base import ConfigurationError, TrainConfig, TrainingError
from src.diffusion import (
    Schedule, SamplerTrace, layout_step_count, losses, pretrain_base, q_sample, region_mask,
    sample_image, sample_timestep, train_layout,
)
from src.encoders import BBox, Vocabulary
from src.mmdit import VariantTag, attach_variant, init_base
from src.numcore import Tensor
from src.scenes import generate, split_seeds
from src.utils.rng import Rng
from tests.fixtures import tiny_config, tiny_layout, tiny_train_config

KS_CRITICAL_001 = 1.628


def _mixture_cdf(config: TrainConfig) -> np.ndarray:
    """CDF at t = 1..T of the rounded, per-component truncated mixture."""
    T = config.timesteps
    ts = np.arange(1, T + 1, dtype=np.float64)
    cdf = np.zeros(T)
    for weight, center, sigma in ((config.mixture_p1, config.mixture_center1, config.sigma1),
                                  (config.mixture_p2, config.mixture_center2, config.sigma2)):
        mean, std = center * T, sigma * T
        low = norm.cdf((0.5 - mean) / std)
        high = norm.cdf((T + 0.5 - mean) / std)
        cdf += weight * (norm.cdf((ts + 0.5 - mean) / std) - low) / (high - low)
    return cdf


def _ks_statistic(draws: np.ndarray, cdf: np.ndarray) -> float:
    counts = np.bincount(draws, minlength=len(cdf) + 1)[1:]
    empirical = np.cumsum(counts) / len(draws)
    return float(np.max(np.abs(empirical - cdf)))


class TestForwardProcess(unittest.TestCase):
    """Test cases for the schedule and q_sample."""

    def setUp(self):
        self.schedule = Schedule(1000)

    def test_t_zero_is_identity(self):
        z0 = np.random.default_rng(0).normal(size=(3, 4, 4))
        np.testing.assert_array_equal(q_sample(self.schedule, z0, 0, np.ones_like(z0)), z0)

    def test_zero_noise_scales(self):
        z0 = np.random.default_rng(1).normal(size=(3, 4, 4))
        expected = math.sqrt(self.schedule.alpha_bar(300)) * z0
        np.testing.assert_allclose(q_sample(self.schedule, z0, 300, np.zeros_like(z0)), expected)

    def test_second_moment(self):
        rng = np.random.default_rng(2)
        z0 = rng.normal(size=(10000, 3))
        eps = rng.normal(size=(10000, 3))
        ab = self.schedule.alpha_bar(500)
        measured = np.mean(np.sum(q_sample(self.schedule, z0, 500, eps) ** 2, axis=1))
        expected = np.mean(np.sum(z0 ** 2, axis=1)) * ab + 3 * (1 - ab)
        self.assertLess(abs(measured - expected) / expected, 0.02)

    def test_schedule_is_decreasing(self):
        self.assertEqual(self.schedule.alpha_bar(0), 1.0)
        self.assertTrue(np.all(np.diff(self.schedule.alpha_bars) < 0))
        with self.assertRaises(ConfigurationError):
            self.schedule.alpha_bar(1001)


class TestTimestepSampling(unittest.TestCase):
    """Test cases for biased timestep sampling."""

    def test_uniform_control(self):
        config = TrainConfig(timesteps=1000, bias_sampling=False)
        rng = Rng(0)
        draws = np.array([sample_timestep(config, rng) for _ in range(100_000)])
        self.assertEqual(draws.min(), 1)
        self.assertEqual(draws.max(), 1000)
        uniform = np.arange(1, 1001) / 1000.0
        self.assertLess(_ks_statistic(draws, uniform), KS_CRITICAL_001 / math.sqrt(len(draws)))

    @pytest.mark.slow
    def test_mixture_matches_truncated_cdf(self):
        config = TrainConfig(timesteps=1000, bias_sampling=True)
        rng = Rng(1)
        draws = np.array([sample_timestep(config, rng) for _ in range(100_000)])
        self.assertTrue(np.all((draws >= 1) & (draws <= 1000)))
        self.assertLess(_ks_statistic(draws, _mixture_cdf(config)), KS_CRITICAL_001 / math.sqrt(len(draws)))
        self.assertGreaterEqual(np.mean(draws > 500), 0.55)

    def test_component_weights(self):
        config = TrainConfig(timesteps=1000, bias_sampling=True)
        rng = Rng(2)
        tags = [sample_timestep(config, rng, tagged=True)[1] for _ in range(100_000)]
        self.assertAlmostEqual(np.mean(np.array(tags) == 1), 0.70, delta=0.01)

    def test_sigma_is_t_stays_in_range(self):
        config = TrainConfig(timesteps=50, sigma_is_t=True)
        rng = Rng(3)
        draws = [sample_timestep(config, rng) for _ in range(2000)]
        self.assertTrue(all(1 <= t <= 50 for t in draws))


class TestLosses(unittest.TestCase):
    """Test cases for the region mask and loss terms."""

    def test_top_left_quarter(self):
        mask = region_mask([BBox(0.0, 0.0, 0.5, 0.5)], 4)
        expected = np.zeros((4, 4), dtype=bool)
        expected[:2, :2] = True
        np.testing.assert_array_equal(mask, expected)

    def test_abutting_boxes_share_no_cell(self):
        left = region_mask([BBox(0.0, 0.0, 0.5, 1.0)], 4)
        right = region_mask([BBox(0.5, 0.0, 1.0, 1.0)], 4)
        self.assertFalse(np.any(left & right))
        self.assertTrue(np.all(left | right))

    def test_uniform_error(self):
        eps = np.zeros((3, 8, 8))
        eps_hat = Tensor(np.full((3, 8, 8), 0.5))
        terms = losses(eps, eps_hat, region_mask([BBox(0.0, 0.0, 0.5, 0.5)], 4), 2.0, 2)
        self.assertAlmostEqual(terms.region.item(), terms.layout.item())
        self.assertAlmostEqual(terms.total.item(), 3.0 * terms.layout.item())

    def test_error_inside_quarter(self):
        mask = region_mask([BBox(0.0, 0.0, 0.5, 0.5)], 4)
        eps_hat = np.zeros((3, 8, 8))
        eps_hat[:, :4, :4] = 1.0
        terms = losses(np.zeros((3, 8, 8)), Tensor(eps_hat), mask, 1.25, 2)
        u = terms.region.item()
        self.assertAlmostEqual(u, 1.0)
        self.assertAlmostEqual(terms.layout.item(), 0.25 * u)
        self.assertAlmostEqual(terms.total.item(), 1.5 * u)
        self.assertAlmostEqual(losses(np.zeros((3, 8, 8)), Tensor(eps_hat), mask, 2.0, 2).total.item(), 2.25 * u)

    def test_empty_mask_region_is_zero(self):
        terms = losses(np.zeros((3, 4, 4)), Tensor(np.ones((3, 4, 4))), np.zeros((2, 2), dtype=bool), 2.0, 2)
        self.assertEqual(terms.region.item(), 0.0)
        self.assertEqual(terms.total.item(), terms.layout.item())

    def test_zero_lambda_is_layout_loss(self):
        rng = np.random.default_rng(0)
        eps_hat = Tensor(rng.normal(size=(3, 8, 8)))
        terms = losses(rng.normal(size=(3, 8, 8)), eps_hat, region_mask([BBox(0.25, 0.25, 0.75, 0.75)], 4),
                       0.0, 2)
        self.assertEqual(terms.total.item(), terms.layout.item())


class TestTraining(unittest.TestCase):
    """Test cases for the two training phases."""

    @classmethod
    def setUpClass(cls):
        cls.config = tiny_config()
        cls.dataset = generate(split_seeds("train", 6), Vocabulary.default(), cls.config)

    def test_freeze_is_bitwise(self):
        base = init_base(self.config, Rng(0)).randomized(Rng(1), std=0.1)
        snapshot = {n: t.data.copy() for n, t in base.params.items()}
        result = train_layout(base, VariantTag.parse("siam"), self.dataset, tiny_train_config(steps=4))
        for name, data in snapshot.items():
            np.testing.assert_array_equal(result.weights[name].data, data)
        untrained = train_layout(base, VariantTag.parse("siam"), self.dataset, tiny_train_config(steps=0))
        changed = [n for n in result.weights.trainable_names()
                   if not np.array_equal(result.weights[n].data, untrained.weights[n].data)]
        self.assertTrue(changed)

    def test_base_variant_rejected(self):
        base = init_base(self.config, Rng(0))
        with self.assertRaises(TrainingError):
            train_layout(base, VariantTag.parse("base"), self.dataset, tiny_train_config())
        adapter = attach_variant(base, VariantTag.parse("adapter"), Rng(0))
        with self.assertRaises(TrainingError):
            train_layout(adapter, VariantTag.parse("siam"), self.dataset, tiny_train_config())

    def test_pretrain_logs_zero_weighted_region(self):
        result = pretrain_base(self.dataset, self.config, tiny_train_config(steps=2, lambda_region=2.0))
        for record in result.metrics.records:
            self.assertEqual(record.loss_total, record.loss_layout)
        self.assertEqual(len(result.metrics.records), 2)

    def test_training_is_deterministic(self):
        config = tiny_train_config(steps=2)
        a = pretrain_base(self.dataset, self.config, config)
        b = pretrain_base(self.dataset, self.config, config)
        self.assertEqual(a.metrics.column("loss_total"), b.metrics.column("loss_total"))

    def test_threaded_batch_matches_serial(self):
        serial = pretrain_base(self.dataset, self.config, tiny_train_config(steps=2))
        threaded = pretrain_base(self.dataset, self.config, tiny_train_config(steps=2, jobs=3))
        self.assertEqual(serial.metrics.column("loss_total"), threaded.metrics.column("loss_total"))

    def test_probes_and_callback(self):
        base = init_base(self.config, Rng(0))
        seen = []

        def stop_after_two(step, weights, metrics):
            seen.append(step)
            return step >= 2

        result = train_layout(base, VariantTag.parse("m3"), self.dataset,
                              tiny_train_config(steps=5, diagnostic_interval=1, probe_size=2),
                              callback=stop_after_two)
        self.assertEqual(seen, [1, 2])
        self.assertEqual([step for step, _ in result.metrics.probes], [0, 1])
        self.assertIsNotNone(result.metrics.probes[0][1].image_layout)


class TestSampler(unittest.TestCase):
    """Test cases for the DDIM sampler and the layout cutoff."""

    def setUp(self):
        self.config = tiny_config()
        self.weights = attach_variant(init_base(self.config, Rng(0)).randomized(Rng(1), std=0.1),
                                      VariantTag.parse("siam"), Rng(2))
        self.layout = tiny_layout(self.config)

    def test_active_step_counts(self):
        self.assertEqual(layout_step_count(50), 15)
        self.assertEqual(layout_step_count(1), 1)
        self.assertEqual(layout_step_count(10), 3)

    def test_cutoff_trace(self):
        for steps in (1, 10, 50):
            trace = SamplerTrace()
            sample_image(self.weights, self.layout, steps=steps, seed=0, schedule=Schedule(100), trace=trace)
            active = layout_step_count(steps)
            with self.subTest(steps=steps):
                self.assertEqual(len(trace.timesteps), steps)
                self.assertEqual(trace.timesteps[0], 100)
                self.assertEqual(trace.layout_active, [i < active for i in range(steps)])
                self.assertTrue(all(c == 0 for c in trace.layout_path_calls[active:]))
                self.assertTrue(all(c > 0 for c in trace.layout_path_calls[:active]))

    def test_deterministic_and_in_range(self):
        a = sample_image(self.weights, self.layout, steps=5, seed=3, schedule=Schedule(100))
        b = sample_image(self.weights, self.layout, steps=5, seed=3, schedule=Schedule(100))
        np.testing.assert_array_equal(a, b)
        self.assertEqual(a.shape, (3, 8, 8))
        self.assertTrue(np.all((a >= 0.0) & (a <= 1.0)))

    def test_stochastic_eta(self):
        a = sample_image(self.weights, self.layout, steps=5, eta=1.0, seed=3, schedule=Schedule(100))
        b = sample_image(self.weights, self.layout, steps=5, eta=1.0, seed=4, schedule=Schedule(100))
        self.assertFalse(np.array_equal(a, b))

    def test_invalid_step_counts(self):
        with self.assertRaises(ConfigurationError):
            sample_image(self.weights, self.layout, steps=0)
        with self.assertRaises(ConfigurationError):
            sample_image(self.weights, self.layout, steps=101, schedule=Schedule(100))


if __name__ == '__main__':
    unittest.main()
