"""Compute and BOPs accounting for compressed models.

MACs count multiply-accumulates of the dense layer; unstructured sparsity
scales them by the surviving-weight density, and BOPs multiply by the weight
and activation bit widths.  The reference budget is the same model dense at
32-bit weights and activations, so relative BOPs = density * w_bits / 32
holds per layer when activations stay at 32 bits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .models import layer_outcome
from .pruning import sparsity

ACTIVATION_BITS = 32
BASELINE_WEIGHT_BITS = 32


def macs_dense(spec):
    """Multiply-accumulates of one dense layer."""
    if spec.kind == "linear":
        return spec.in_features * spec.out_features
    if spec.kind == "conv2d":
        return (spec.in_channels * spec.out_channels
                * spec.kernel[0] * spec.kernel[1]
                * spec.out_size[0] * spec.out_size[1])
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def bops_layer(spec, density, w_bits, a_bits=ACTIVATION_BITS):
    """BOPs of one layer under unstructured sparsity."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    if w_bits < 1 or a_bits < 1:
        raise ValueError("bit widths must be >= 1")
    return density * macs_dense(spec) * w_bits * a_bits


@dataclass
class LayerReport:
    name: str
    kind: str
    params: int
    density: float
    w_bits: int
    deadzone: float
    scale: float
    macs_dense: int
    macs_unstructured: float
    bops: float


@dataclass
class CompressionReport:
    layers: list
    total_bops: float
    baseline_bops: float
    relative_bops: float
    overall_sparsity: float
    mean_bits: float
    accuracy: float | None = None
    mode: str = "quant"
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def build_report(model, accuracy=None, mode="quant"):
    """Quantize each layer post hoc and collect the BOPs bookkeeping."""
    layers, total, baseline = [], 0.0, 0.0
    zeros, weight_count, bits_sum = 0, 0, 0.0
    for layer in model.layers:
        dense = macs_dense(layer.spec)
        if mode == "fp32":
            density = 1.0 - sparsity(layer.weight)
            w_bits, dz, scale = BASELINE_WEIGHT_BITS, 0.0, 0.0
            zeros += int(np.count_nonzero(layer.weight == 0))
        else:
            outcome = layer_outcome(layer)
            density = 1.0 - sparsity(outcome.w_hat.value)
            w_bits, dz, scale = outcome.bits, outcome.deadzone, outcome.scale
            zeros += int(np.count_nonzero(outcome.w_hat.value == 0))
        bops = bops_layer(layer.spec, density, w_bits)
        layers.append(LayerReport(
            name=layer.name, kind=layer.spec.kind, params=layer.weight.size,
            density=density, w_bits=w_bits, deadzone=dz, scale=scale,
            macs_dense=dense, macs_unstructured=density * dense, bops=bops))
        total += bops
        baseline += bops_layer(layer.spec, 1.0, BASELINE_WEIGHT_BITS)
        weight_count += layer.weight.size
        bits_sum += w_bits
    if baseline <= 0:
        raise ValueError("model has no MACs to report")
    return CompressionReport(
        layers=layers,
        total_bops=total,
        baseline_bops=baseline,
        relative_bops=total / baseline,
        overall_sparsity=zeros / weight_count,
        mean_bits=bits_sum / len(model.layers),
        accuracy=accuracy,
        mode=mode,
    )
