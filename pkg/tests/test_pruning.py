"""Magnitude masks, sparsity, and the pruning/quantizer agreement oracle."""

import numpy as np
import pytest

from dzq.autodiff import round_mode
from dzq.pruning import Mask, equivalence_oracle, magnitude_mask, sparsity
from dzq.quantizers import pruning_aware_scale


class TestMagnitudeMask:
    def test_frozen_example(self):
        mask = magnitude_mask([0.9, -0.3, 0.1], 0.35)
        np.testing.assert_array_equal(mask.bits, [1, 0, 0])
        assert mask.threshold == 0.35

    def test_boundary_is_pruned(self):
        mask = magnitude_mask([0.35], 0.35)
        np.testing.assert_array_equal(mask.bits, [0])

    def test_just_above_boundary_survives(self):
        mask = magnitude_mask([np.nextafter(0.35, 1.0)], 0.35)
        np.testing.assert_array_equal(mask.bits, [1])

    def test_zero_threshold_prunes_only_exact_zeros(self):
        mask = magnitude_mask([0.0, -0.0, 1e-300, -2.0], 0.0)
        np.testing.assert_array_equal(mask.bits, [0, 0, 1, 1])

    def test_bits_dtype(self):
        assert magnitude_mask([1.0], 0.5).bits.dtype == np.uint8

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            magnitude_mask([1.0], -0.1)


class TestSparsity:
    def test_frozen_examples(self):
        assert sparsity([0.0, 1.0, 0.0, 2.0]) == 0.5
        assert sparsity(np.zeros(7)) == 1.0
        assert sparsity(np.ones((3, 3))) == 0.0

    def test_negative_zero_counts(self):
        assert sparsity([-0.0, 1.0]) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            sparsity([])


class TestEquivalenceOracle:
    def test_agrees_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            w = rng.uniform(-2, 2, size=int(rng.integers(1, 512)))
            r = float(np.max(np.abs(w)))
            d = float(rng.uniform(0.0, 2 * r))
            assert equivalence_oracle(w, pruning_aware_scale(r, d, 4), d, 4)

    def test_agrees_with_boundary_plants(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            w = rng.uniform(-2, 2, size=16)
            r = float(np.max(np.abs(w)))
            d = float(rng.uniform(0.05, 2 * r))
            w[0], w[1] = d * 0.5, -(d * 0.5)
            r = float(np.max(np.abs(w)))
            assert equivalence_oracle(w, pruning_aware_scale(r, d, 4), d, 4)

    def test_detects_away_rounding_fault(self):
        # under away-from-zero rounding a weight planted exactly on the
        # boundary survives quantization, so the two routes must disagree
        d = 0.8
        w = np.array([d * 0.5, 1.0])
        with round_mode("away"):
            agreed = equivalence_oracle(w, pruning_aware_scale(1.0, d, 4), d, 4)
        assert not agreed
