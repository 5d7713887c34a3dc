#!/usr/bin/env python3
"""
Unit tests for optim.py module.
"""

import unittest

import numpy as np

from src.base import ConfigurationError, NumericalError
from src.optim import SGD, Adam, make_optimizer
from src.numcore import Tensor
from tests.fixtures import tiny_train_config


def _param(value):
    return Tensor(np.array([value], dtype=np.float64), requires_grad=True)


class TestOptimizers(unittest.TestCase):
    """Test cases for SGD and Adam updates."""

    def test_adam_first_step_is_learning_rate_sized(self):
        p = _param(1.0)
        optimizer = Adam([p], 0.1)
        p.grad = np.array([2.0])
        optimizer.step()
        self.assertAlmostEqual(p.data[0], 0.9, places=6)

    def test_sgd_momentum_accumulates(self):
        p = _param(0.0)
        optimizer = SGD([p], 0.1, momentum=0.9)
        for _ in range(2):
            p.grad = np.array([1.0])
            optimizer.step()
        self.assertAlmostEqual(p.data[0], -0.29)

    def test_missing_gradient_is_skipped(self):
        p = _param(3.0)
        Adam([p], 0.1).step()
        self.assertEqual(p.data[0], 3.0)

    def test_zero_grad(self):
        p = _param(1.0)
        p.grad = np.array([1.0])
        SGD([p], 0.1).zero_grad()
        self.assertIsNone(p.grad)

    def test_non_finite_gradient(self):
        p = _param(1.0)
        p.grad = np.array([np.nan])
        with self.assertRaises(NumericalError):
            Adam([p], 0.1).step()

    def test_learning_rate_must_be_positive(self):
        with self.assertRaises(ConfigurationError):
            SGD([_param(1.0)], 0.0)

    def test_factory(self):
        params = [_param(1.0)]
        self.assertIsInstance(make_optimizer(params, tiny_train_config()), Adam)
        self.assertIsInstance(make_optimizer(params, tiny_train_config(optimizer="sgd")), SGD)


if __name__ == '__main__':
    unittest.main()
