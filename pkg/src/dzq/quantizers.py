"""Uniform and dead-zone weight quantizers with learnable width and bit count.

The dead-zone quantizer is a symmetric mid-tread quantizer whose zero bin is
widened to d (the ordinary uniform quantizer has d = s).  Everything that is
supposed to receive gradient (the dead-zone width via theta_dz, the bit
count via theta_bit, and the weights themselves) is expressed as tape nodes
so one backward pass trains all of them jointly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tape,
    TensorNode,
    abs_,
    pow2,
    ste_clip,
    masked_clip,
    ste_relu,
    ste_round,
    stop_gradient,
    tanh_,
    zero_grad_sign,
)

EPSILON_DEFAULT = 1e-8


def _qmax(bits):
    if not isinstance(bits, (int, np.integer)) or bits < 2:
        raise ValueError(f"bit count must be an integer >= 2, got {bits!r}")
    return 2 ** (bits - 1) - 1


@dataclass
class LayerQuantState:
    """Per-layer quantizer parameters.

    Exactly one of fixed_bits / theta_bit must be set; theta_dz is always
    present.  detach_scale_from_d cuts the gradient path from the dead-zone
    width into the scale (ablation switch); the width path itself stays live.
    """

    theta_dz: float = 3.0
    theta_bit: float | None = None
    fixed_bits: int | None = 4
    b_min: int = 2
    b_max: int = 8
    quantile: float = 0.99
    epsilon: float = EPSILON_DEFAULT
    detach_scale_from_d: bool = False

    def __post_init__(self):
        if (self.fixed_bits is None) == (self.theta_bit is None):
            raise ValueError("exactly one of fixed_bits / theta_bit must be set")
        if self.fixed_bits is not None and not 2 <= self.fixed_bits <= 16:
            raise ValueError(f"fixed_bits out of range [2, 16]: {self.fixed_bits}")
        if not 2 <= self.b_min <= self.b_max <= 16:
            raise ValueError(f"need 2 <= b_min <= b_max <= 16, got "
                             f"[{self.b_min}, {self.b_max}]")
        if not 0.0 < self.quantile <= 1.0:
            raise ValueError(f"quantile must lie in (0, 1], got {self.quantile}")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")

    @property
    def mixed(self):
        return self.theta_bit is not None


@dataclass
class QuantOutcome:
    """Result of quantizing one weight tensor."""

    w_hat: TensorNode          # reconstructed weights, still on the tape
    w_bar: np.ndarray          # integer grid indices in [-Q_b, Q_b]
    scale: float
    deadzone: float
    bits: int
    range_stat: float = field(default=0.0)


def _scalar_node(tape, x, name):
    if isinstance(x, TensorNode):
        if x.value.size != 1:
            raise ValueError(f"{name} must be a scalar, got shape {x.shape}")
        return x
    return tape.const(float(x))


def range_stat(w, quantile=1.0):
    """Nearest-rank quantile of |w| as a gradient-stopped scalar node.

    quantile 1.0 gives the plain absmax.  The statistic is treated as a
    constant of the optimization: no gradient flows back into w through it.
    """
    if not 0.0 < quantile <= 1.0:
        raise ValueError(f"quantile must lie in (0, 1], got {quantile}")
    magnitudes = np.abs(w.value).ravel()
    n = magnitudes.size
    if n == 0:
        raise ValueError("range_stat of an empty tensor")
    k = math.ceil(quantile * n) - 1
    return w.tape.const(np.partition(magnitudes, k)[k])


def absmax_scale(range_value, bits):
    """Scale of the plain absmax uniform quantizer: R / (2^(b-1) - 1)."""
    if range_value < 0:
        raise ValueError("range statistic must be non-negative")
    return float(range_value) / _qmax(bits)


def pruning_aware_scale(range_value, deadzone, bits, epsilon=EPSILON_DEFAULT):
    """Scale that ends the grid exactly at R for zero-bin width d.

    s = (R - d/2) / (Q_b - 1/2) + epsilon.  The epsilon is added
    unconditionally so a fully-opened dead zone (d = 2R) cannot produce a
    zero scale.
    """
    r = float(range_value)
    d = float(deadzone)
    if d < 0 or d > 2 * r:
        raise ValueError(f"dead-zone width {d} outside [0, {2 * r}]")
    return (r - d / 2) / (_qmax(bits) - 0.5) + epsilon


def absmax_recovery_fixed_point(range_value, bits, iterations=200):
    """Solve d = pruning_aware_scale(R, d, b, 0) by bisection.

    The fixed point is the dead-zone width at which the pruning-aware grid
    degenerates into the plain absmax grid (analytically R / Q_b).
    """
    r = float(range_value)
    if r <= 0:
        raise ValueError("range statistic must be positive")
    q = _qmax(bits)

    def gap(d):
        return d - (r - d / 2) / (q - 0.5)

    lo, hi = 0.0, 2 * r
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def uniform_quantize(w, scale, bits, clip_rule="pass"):
    """Symmetric mid-tread quantizer: w_bar = clip(round(w / s), -Q_b, Q_b).

    clip_rule selects the backward behaviour of the clip: "pass" propagates
    gradients everywhere, "masked" gates them to the in-range region.
    """
    tape = w.tape
    s_node = _scalar_node(tape, scale, "scale")
    s_val = float(s_node.value)
    if s_val <= 0:
        raise ValueError(f"scale must be positive, got {s_val}")
    q = float(_qmax(bits))
    clip = {"pass": ste_clip, "masked": masked_clip}[clip_rule]
    w_bar = clip(ste_round(w / s_node), -q, q)
    w_hat = s_node * w_bar
    return QuantOutcome(
        w_hat=w_hat,
        w_bar=np.rint(w_bar.value).astype(np.int64),
        scale=s_val,
        deadzone=s_val,
        bits=int(bits),
        range_stat=float(np.max(np.abs(w.value))) if w.value.size else 0.0,
    )


def deadzone_quantize(w, scale, deadzone, bits, clip_rule="pass",
                      range_value=None):
    """Dead-zone quantizer with straight-through gradients.

    Forward:  w_bar = clip(round(sign(w) * relu(|w| - delta) / s), -Q_b, Q_b)
              w_hat = sign(w_bar) * delta + s * w_bar,   delta = d/2 - s/2.

    Inputs exactly on the pruning boundary |w| = d/2 hit the rounding tie at
    0.5 and fall into the zero bin, so the zero set is {|w| <= d/2} exactly.
    """
    tape = w.tape
    s_node = _scalar_node(tape, scale, "scale")
    d_node = _scalar_node(tape, deadzone, "deadzone")
    s_val = float(s_node.value)
    d_val = float(d_node.value)
    if s_val <= 0:
        raise ValueError(f"scale must be positive, got {s_val}")
    w_absmax = float(np.max(np.abs(w.value))) if w.value.size else 0.0
    if d_val < 0 or d_val > 2 * w_absmax:
        raise ValueError(f"dead-zone width {d_val} outside [0, {2 * w_absmax}]")
    q = float(_qmax(bits))
    clip = {"pass": ste_clip, "masked": masked_clip}[clip_rule]

    half_d = d_node * 0.5
    half_s = s_node * 0.5
    delta = half_d - half_s
    # (|w| - d/2) + s/2 rather than |w| - delta: a weight planted exactly at
    # the boundary d/2 must land exactly on the 0.5 rounding tie.
    shifted = (abs_(w) - half_d) + half_s
    folded = ste_relu(shifted)
    ratio = (zero_grad_sign(w) * folded) / s_node
    w_bar = clip(ste_round(ratio), -q, q)
    w_hat = zero_grad_sign(w_bar) * delta + s_node * w_bar

    if range_value is None:
        range_value = w_absmax
    return QuantOutcome(
        w_hat=w_hat,
        w_bar=np.rint(w_bar.value).astype(np.int64),
        scale=s_val,
        deadzone=d_val,
        bits=int(bits),
        range_stat=float(range_value),
    )


def deadzone_width(theta_dz, range_value):
    """Learnable dead-zone width d = 2R (1 - tanh|theta_dz|) as a node."""
    if not isinstance(theta_dz, TensorNode):
        raise TypeError("theta_dz must be a TensorNode")
    r = float(range_value)
    if r < 0:
        raise ValueError("range statistic must be non-negative")
    return (1.0 - tanh_(abs_(theta_dz))) * (2.0 * r)


def learnable_bit(theta_bit, b_min=2, b_max=8):
    """Bit count b = round(tanh|theta_bit| * (b_max - b_min) + b_min).

    Returns the integer forward value together with the continuous surrogate
    node the gradient flows through.
    """
    if not isinstance(theta_bit, TensorNode):
        raise TypeError("theta_bit must be a TensorNode")
    if not 2 <= b_min <= b_max <= 16:
        raise ValueError(f"need 2 <= b_min <= b_max <= 16, got [{b_min}, {b_max}]")
    b_cont = tanh_(abs_(theta_bit)) * float(b_max - b_min) + float(b_min)
    bits = int(np.rint(b_cont.value))
    return bits, b_cont


def learnable_scale(theta_bit, deadzone, range_value, epsilon=EPSILON_DEFAULT,
                    b_min=2, b_max=8):
    """Pruning-aware scale with the bit count driven by theta_bit.

    Q_b enters through 2^(b-1) - 1 with b = ste_round(b_cont), so the scale
    stays differentiable in theta_bit along the continuous surrogate.
    Returns (scale node, integer bit count).
    """
    if not isinstance(deadzone, TensorNode):
        raise TypeError("deadzone must be a TensorNode")
    r = float(range_value)
    d_val = float(deadzone.value)
    if d_val < 0 or d_val > 2 * r:
        raise ValueError(f"dead-zone width {d_val} outside [0, {2 * r}]")
    bits, b_cont = learnable_bit(theta_bit, b_min, b_max)
    q_node = pow2(ste_round(b_cont) - 1.0) - 1.0
    scale = (r - deadzone * 0.5) / (q_node - 0.5) + epsilon
    return scale, bits


def quantize_layer(w, state, theta_dz=None, theta_bit=None):
    """Quantize one weight tensor according to its LayerQuantState.

    theta_dz / theta_bit may be supplied as tape nodes (training); otherwise
    constant nodes are built from the state (post-hoc use, no gradients).
    """
    tape = w.tape
    if theta_dz is None:
        theta_dz = tape.const(state.theta_dz)
    r = float(range_stat(w, state.quantile).value)
    d_node = deadzone_width(theta_dz, r)
    d_for_scale = stop_gradient(d_node) if state.detach_scale_from_d else d_node
    if state.mixed:
        if theta_bit is None:
            theta_bit = tape.const(state.theta_bit)
        s_node, bits = learnable_scale(theta_bit, d_for_scale, r, state.epsilon,
                                       state.b_min, state.b_max)
    else:
        bits = state.fixed_bits
        q = float(_qmax(bits))
        s_node = (r - d_for_scale * 0.5) / (q - 0.5) + state.epsilon
    return deadzone_quantize(w, s_node, d_node, bits, range_value=r)
