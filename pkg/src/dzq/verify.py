"""Randomized property suites behind the `verify` CLI command.

Each suite returns a CheckResult; a failure carries a minimal counterexample
dump so the offending instance can be replayed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward, sum_
from .pruning import equivalence_oracle, magnitude_mask
from .quantizers import (
    absmax_recovery_fixed_point,
    absmax_scale,
    deadzone_quantize,
    pruning_aware_scale,
    quantize_layer,
    uniform_quantize,
    LayerQuantState,
)


@dataclass
class CheckResult:
    name: str
    trials: int
    passed: bool
    detail: str = ""
    counterexample: dict = field(default_factory=dict)


def _sample_instance(rng, max_size=4096):
    size = int(rng.integers(1, max_size + 1))
    w = rng.uniform(-2.0, 2.0, size=size)
    r = float(np.max(np.abs(w)))
    d = float(rng.uniform(0.0, 2.0 * r))
    bits = int(rng.integers(2, 9))
    scale = pruning_aware_scale(r, d, bits)
    return w, scale, d, bits


def check_equivalence(seed, trials):
    """Dead-zone zero set == magnitude-mask complement, with boundary plants."""
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        w, scale, d, bits = _sample_instance(rng)
        if w.size >= 4 and d > 0:
            # plant exact boundary hits, both signs
            w[0], w[1] = d * 0.5, -(d * 0.5)
        if not equivalence_oracle(w, scale, d, bits):
            mask = magnitude_mask(w, d * 0.5)
            tape = Tape()
            out = deadzone_quantize(tape.const(w), scale, d, bits)
            bad = np.nonzero((out.w_hat.value == 0.0) != (mask.bits == 0))[0][:4]
            return CheckResult(
                "deadzone zero set vs magnitude mask", trials, False,
                f"mismatch at trial {trial}",
                {"trial": trial, "scale": scale, "deadzone": d, "bits": bits,
                 "indices": bad.tolist(), "w": w[bad].tolist(),
                 "w_hat": out.w_hat.value[bad].tolist(),
                 "threshold": d * 0.5})
    return CheckResult("deadzone zero set vs magnitude mask", trials, True)


def check_reduction(seed, trials):
    """deadzone_quantize(w, s, d=s, b) is bit-identical to uniform_quantize."""
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        size = int(rng.integers(1, 4097))
        w = rng.uniform(-2.0, 2.0, size=size)
        bits = int(rng.integers(2, 9))
        scale = absmax_scale(np.max(np.abs(w)), bits)
        if scale == 0.0:
            continue
        tape = Tape()
        wn = tape.const(w)
        dz = deadzone_quantize(wn, scale, scale, bits)
        un = uniform_quantize(wn, scale, bits)
        if not (np.array_equal(dz.w_hat.value, un.w_hat.value)
                and np.array_equal(dz.w_bar, un.w_bar)):
            idx = np.nonzero(dz.w_hat.value != un.w_hat.value)[0][:4]
            return CheckResult(
                "reduction to uniform at d = s", trials, False,
                f"mismatch at trial {trial}",
                {"trial": trial, "scale": scale, "bits": bits,
                 "indices": idx.tolist(), "w": w[idx].tolist()})
    return CheckResult("reduction to uniform at d = s", trials, True)


def check_recovery(seed, trials):
    """Bisection fixed point of the pruning-aware scale equals R / Q_b."""
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        r = float(rng.uniform(1e-3, 10.0))
        bits = int(rng.integers(2, 9))
        got = absmax_recovery_fixed_point(r, bits)
        want = absmax_scale(r, bits)
        if abs(got - want) > 1e-12 * max(abs(want), 1e-30):
            return CheckResult(
                "absmax recovery fixed point", trials, False,
                f"trial {trial}: |{got} - {want}| too large",
                {"trial": trial, "range": r, "bits": bits,
                 "fixed_point": got, "analytic": want})
    return CheckResult("absmax recovery fixed point", trials, True)


def check_grid_extremum(seed, trials):
    """Largest reconstruction level equals R when epsilon is zero."""
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        r = float(rng.uniform(0.5, 5.0))
        bits = int(rng.integers(2, 9))
        d = float(rng.uniform(0.0, 2.0 * r * 0.999))
        scale = pruning_aware_scale(r, d, bits, epsilon=0.0)
        if scale <= 0.0:
            continue
        q = 2 ** (bits - 1) - 1
        top = (d - scale) * 0.5 + scale * q
        if abs(top - r) > 1e-12 * max(r, 1.0):
            return CheckResult(
                "grid extremum at the range statistic", trials, False,
                f"trial {trial}: top level {top} vs R {r}",
                {"trial": trial, "range": r, "bits": bits, "deadzone": d,
                 "top_level": top})
    return CheckResult("grid extremum at the range statistic", trials, True)


def check_weight_gradient(seed, trials):
    """d w_hat / d w == 1 exactly for nonzero weights (backward of sum)."""
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        size = int(rng.integers(1, 513))
        w = rng.uniform(-2.0, 2.0, size=size)
        w[np.abs(w) < 1e-6] = 0.5  # keep away from the sign kink at zero
        r = float(np.max(np.abs(w)))
        bits = int(rng.integers(2, 9))
        d = float(rng.uniform(0.0, 2.0 * r))
        scale = pruning_aware_scale(r, d, bits)
        tape = Tape()
        wn = tape.tensor(w, requires_grad=True)
        out = deadzone_quantize(wn, scale, d, bits)
        backward(sum_(out.w_hat))
        if not np.array_equal(wn.grad, np.ones_like(w)):
            idx = np.nonzero(wn.grad != 1.0)[0][:4]
            return CheckResult(
                "weight gradient identity", trials, False,
                f"trial {trial}: gradient not exactly one",
                {"trial": trial, "scale": scale, "deadzone": d, "bits": bits,
                 "indices": idx.tolist(), "grad": wn.grad[idx].tolist()})
    return CheckResult("weight gradient identity", trials, True)


def surrogate_reconstruction(w, r, theta_dz, theta_bit, base, eps,
                             b_min=2, b_max=8):
    """Quantizer output under the straight-through surrogate semantics.

    Each non-differentiable op is replaced by its base-point linearization:
    round/relu/clip become identity plus the constant offset that reproduces
    their forward value at `base`, and signs freeze at their base values.
    Finite differences of this function are what the tape gradients promise.
    """
    d = 2.0 * r * (1.0 - np.tanh(abs(theta_dz)))
    b_cont = np.tanh(abs(theta_bit)) * (b_max - b_min) + b_min
    b = b_cont + base["round_b_offset"]
    q = 2.0 ** (b - 1.0) - 1.0
    s = (r - d * 0.5) / (q - 0.5) + eps
    delta = d * 0.5 - s * 0.5
    shifted = (np.abs(w) - d * 0.5) + s * 0.5
    folded = shifted + base["relu_offset"]
    ratio = base["sign_w"] * folded / s
    rounded = ratio + base["round_offset"]
    clipped = rounded + base["clip_offset"]
    return base["sign_wbar"] * delta + s * clipped


def _theta_instance(rng):
    size = int(rng.integers(2, 129))
    w = rng.uniform(-2.0, 2.0, size=size)
    w[np.abs(w) < 1e-3] = 0.5
    theta_dz = float(rng.uniform(0.1, 3.0))
    theta_bit = float(rng.uniform(0.1, 3.0))
    return w, theta_dz, theta_bit


def _decisions(w, r, theta_dz, theta_bit, eps, b_min, b_max):
    """Forward pass decisions (round/clip/relu/sign outcomes) at a point."""
    d = 2.0 * r * (1.0 - np.tanh(abs(theta_dz)))
    b_cont = np.tanh(abs(theta_bit)) * (b_max - b_min) + b_min
    b = float(np.rint(b_cont))
    q = 2.0 ** (b - 1.0) - 1.0
    s = (r - d * 0.5) / (q - 0.5) + eps
    shifted = (np.abs(w) - d * 0.5) + s * 0.5
    folded = np.maximum(shifted, 0.0)
    ratio = np.sign(w) * folded / s
    rounded = np.rint(ratio)
    clipped = np.clip(rounded, -q, q)
    return {"b": b, "rounded": rounded, "clipped": clipped,
            "relu_on": shifted > 0, "sign_wbar": np.sign(clipped),
            "ratio": ratio, "folded": folded, "s": s, "d": d,
            "b_cont": b_cont, "q": q}


def check_theta_gradients(seed, trials, h=1e-5, rtol=1e-5):
    """Tape gradients for theta_dz / theta_bit match central finite
    differences of the surrogate reconstruction.

    Instances whose forward decisions flip within +-h are resampled.  The
    comparison allows, besides the relative tolerance, an absolute slack of
    100 eps |f| / (2h): the roundoff floor of a 64-bit central difference,
    below which no finite-difference oracle can adjudicate.
    """
    rng = np.random.default_rng(seed)
    state_proto = dict(b_min=2, b_max=8, quantile=1.0, epsilon=1e-8)
    done = 0
    attempts = 0
    while done < trials:
        attempts += 1
        if attempts > trials * 50 + 100:
            return CheckResult("theta gradients vs finite differences",
                               trials, False, "resampling did not converge")
        w, theta_dz, theta_bit = _theta_instance(rng)
        r = float(np.max(np.abs(w)))
        eps = state_proto["epsilon"]
        center = _decisions(w, r, theta_dz, theta_bit, eps, 2, 8)
        stable = True
        for name in ("dz", "bit"):
            for signbit in (-1.0, 1.0):
                t_dz = theta_dz + signbit * h if name == "dz" else theta_dz
                t_bit = theta_bit + signbit * h if name == "bit" else theta_bit
                probe = _decisions(w, r, t_dz, t_bit, eps, 2, 8)
                if (probe["b"] != center["b"]
                        or not np.array_equal(probe["rounded"], center["rounded"])
                        or not np.array_equal(probe["relu_on"], center["relu_on"])
                        or not np.array_equal(probe["sign_wbar"],
                                              center["sign_wbar"])):
                    stable = False
        if not stable:
            continue

        tape = Tape()
        wn = tape.const(w)
        th_dz = tape.tensor(theta_dz, requires_grad=True)
        th_bit = tape.tensor(theta_bit, requires_grad=True)
        state = LayerQuantState(theta_dz=theta_dz, theta_bit=theta_bit,
                                fixed_bits=None, **state_proto)
        out = quantize_layer(wn, state, th_dz, th_bit)
        backward(sum_(out.w_hat))

        base = {
            "sign_w": np.sign(w),
            "sign_wbar": center["sign_wbar"],
            "relu_offset": center["folded"] - ((np.abs(w) - center["d"] * 0.5)
                                               + center["s"] * 0.5),
            "round_offset": center["rounded"] - center["ratio"],
            "clip_offset": center["clipped"] - center["rounded"],
            "round_b_offset": center["b"] - center["b_cont"],
        }

        def value_at(t_dz, t_bit):
            return math.fsum(surrogate_reconstruction(
                w, r, t_dz, t_bit, base, eps).tolist())

        f_scale = max(1.0, abs(value_at(theta_dz, theta_bit)))
        atol = 100.0 * np.finfo(np.float64).eps * f_scale / (2.0 * h)
        for name, node, lo, hi in (
                ("theta_dz", th_dz, (theta_dz - h, theta_bit),
                 (theta_dz + h, theta_bit)),
                ("theta_bit", th_bit, (theta_dz, theta_bit - h),
                 (theta_dz, theta_bit + h))):
            fd = (value_at(*hi) - value_at(*lo)) / (2.0 * h)
            got = float(node.grad)
            if abs(fd - got) > max(rtol * max(abs(fd), abs(got)), atol):
                return CheckResult(
                    "theta gradients vs finite differences", trials, False,
                    f"{name} mismatch at instance {done}",
                    {"instance": done, "param": name, "theta_dz": theta_dz,
                     "theta_bit": theta_bit, "size": int(w.size),
                     "tape": got, "finite_diff": fd})
        done += 1
    return CheckResult("theta gradients vs finite differences", trials, True)


def run_all(seed=0, trials=10000):
    """Run every suite; trial counts scale off the equivalence budget."""
    small = max(trials // 10, 0)
    return [
        check_equivalence(seed, trials),
        check_reduction(seed + 1, small),
        check_recovery(seed + 2, min(small, 100)),
        check_grid_extremum(seed + 3, small),
        check_weight_gradient(seed + 4, min(small, 200)),
        check_theta_gradients(seed + 5, min(max(trials // 20, 0), 500)),
    ]
