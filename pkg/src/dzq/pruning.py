"""Magnitude pruning masks and the dead-zone/pruning equivalence oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .quantizers import deadzone_quantize


@dataclass
class Mask:
    """Binary keep-mask: bits[i] = 1 means the weight survives."""

    bits: np.ndarray
    threshold: float


def magnitude_mask(w, threshold):
    """Keep exactly the weights with |w| strictly above the threshold."""
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    w = np.asarray(w, dtype=np.float64)
    return Mask(bits=(np.abs(w) > threshold).astype(np.uint8),
                threshold=float(threshold))


def sparsity(x):
    """Fraction of exactly-zero entries."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("sparsity of an empty tensor")
    return float(np.count_nonzero(x == 0) / x.size)


def equivalence_oracle(w, scale, deadzone, bits):
    """Check that the dead-zone quantizer prunes exactly the magnitude mask.

    Runs the quantizer on a fresh tape and compares its zero set against the
    complement of magnitude_mask(w, d/2), which is computed without touching
    the quantizer at all.
    """
    w = np.asarray(w, dtype=np.float64)
    tape = Tape()
    outcome = deadzone_quantize(tape.const(w), scale, deadzone, bits)
    mask = magnitude_mask(w, deadzone * 0.5)
    return bool(np.array_equal(outcome.w_hat.value == 0.0, mask.bits == 0))
