#!/usr/bin/env python3
"""
Unit tests for rng.py module.
"""

import unittest

import numpy as np

from src.utils.rng import MASK64, Rng, Xoshiro256pp, splitmix64


class TestGenerators(unittest.TestCase):
    """Test cases for splitmix64 and xoshiro256++."""

    def test_splitmix64_first_output(self):
        _, out = splitmix64(0)
        self.assertEqual(out, 0xE220A8397B1DCDAF)

    def test_xoshiro_is_deterministic(self):
        a, b = Xoshiro256pp(42), Xoshiro256pp(42)
        self.assertEqual([a.next_u64() for _ in range(5)], [b.next_u64() for _ in range(5)])
        self.assertTrue(all(0 <= Xoshiro256pp(1).next_u64() <= MASK64 for _ in range(3)))

    def test_uniform_range(self):
        gen = Xoshiro256pp(3)
        values = [gen.random() for _ in range(1000)]
        self.assertTrue(all(0.0 <= v < 1.0 for v in values))
        self.assertAlmostEqual(float(np.mean(values)), 0.5, delta=0.05)


class TestStreams(unittest.TestCase):
    """Test cases for named substreams."""

    def test_substream_ignores_parent_draws(self):
        fresh = Rng(7).substream("data").next_u64()
        parent = Rng(7)
        for _ in range(10):
            parent.next_u64()
        parent.normal(5)
        self.assertEqual(parent.substream("data").next_u64(), fresh)

    def test_names_and_seeds_separate_streams(self):
        self.assertNotEqual(Rng(7).substream("a").next_u64(), Rng(7).substream("b").next_u64())
        self.assertNotEqual(Rng(7).substream("a").next_u64(), Rng(8).substream("a").next_u64())
        self.assertNotEqual(Rng(7).substream("a").substream("b").next_u64(),
                            Rng(7).substream("a/b").substream("x").next_u64())

    def test_bulk_draws_are_reproducible(self):
        np.testing.assert_array_equal(Rng(1).normal((3, 3)), Rng(1).normal((3, 3)))
        ints = Rng(2).integers(0, 4, size=100)
        self.assertTrue(np.all((ints >= 0) & (ints < 4)))

    def test_repr(self):
        self.assertEqual(repr(Rng(0).substream("x")), "Rng(path='root/x')")


if __name__ == '__main__':
    unittest.main()
