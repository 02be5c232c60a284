"""Joint training of weights, dead-zone widths and bit counts.

Each step rebuilds the graph on a fresh tape: quantized forward, task loss
plus the explicit regularizers, one backward pass, then SGD updates with the
weight and theta groups at their own learning rates (momentum only on the
weight group; thetas use plain SGD).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward, mul, softmax_cross_entropy, sum_
from .data import batches
from .errors import DivergenceError
from .models import accuracy, layer_outcome, run_forward
from .pruning import sparsity
from .quantizers import LayerQuantState, learnable_bit


@dataclass
class TrainConfig:
    lambda_dz: float = 0.01
    lambda_bit: float = 0.0
    lambda_w: float = 0.0
    lr_weights: float = 0.1
    lr_theta: float = 1e-3
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    bits: int | None = 4           # fixed-bit mode when mixed_precision is off
    mixed_precision: bool = False
    fp32: bool = False             # dense full-precision baseline, no quantizer
    init_theta: float = 3.0
    quantile: float = 0.99
    b_min: int = 2
    b_max: int = 8
    epsilon: float = 1e-8
    cosine_lr: bool = True
    detach_scale_from_d: bool = False

    def __post_init__(self):
        if self.lr_weights <= 0 or self.lr_theta <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.fp32 and not self.mixed_precision:
            if self.bits is None or not 2 <= self.bits <= 16:
                raise ValueError("fixed-bit mode needs bits in [2, 16]")

    @property
    def mode(self):
        if self.fp32:
            return "fp32"
        return "mixed" if self.mixed_precision else "fixed"


@dataclass
class LayerEpochStats:
    name: str
    kind: str
    sparsity: float
    deadzone: float
    scale: float
    bits: int
    theta_dz: float
    theta_bit: float | None


@dataclass
class EpochStats:
    epoch: int
    lr_weights: float
    train_acc: float
    val_acc: float
    loss: float
    overall_sparsity: float
    mean_bits: float
    layers: list = field(default_factory=list)


def init_quant_states(model, cfg):
    """Reset every layer's quantizer parameters from the config."""
    for layer in model.layers:
        layer.state = LayerQuantState(
            theta_dz=cfg.init_theta,
            theta_bit=cfg.init_theta if cfg.mixed_precision else None,
            fixed_bits=None if cfg.mixed_precision else cfg.bits,
            b_min=cfg.b_min, b_max=cfg.b_max,
            quantile=cfg.quantile, epsilon=cfg.epsilon,
            detach_scale_from_d=cfg.detach_scale_from_d,
        )


def regularized_loss(task_loss, weights, theta_dz, theta_bit, cfg):
    """task loss + lambda_dz sum(theta_dz^2) + lambda_bit sum(theta_bit^2)
    + lambda_w sum(||W||^2); terms with a zero coefficient are omitted, so
    all-zero coefficients return the task loss node itself."""
    loss = task_loss
    if cfg.lambda_dz != 0.0:
        for theta in theta_dz:
            if theta is not None:
                loss = loss + cfg.lambda_dz * mul(theta, theta)
    if cfg.lambda_bit != 0.0:
        for theta in theta_bit:
            if theta is not None:
                loss = loss + cfg.lambda_bit * mul(theta, theta)
    if cfg.lambda_w != 0.0:
        for w in weights:
            loss = loss + cfg.lambda_w * sum_(mul(w, w))
    return loss


class SgdMomentum:
    """SGD with a velocity buffer per parameter: v = m v + g; p -= lr v."""

    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, name, param, grad):
        if self.momentum == 0.0:
            param -= self.lr * grad
            return
        v = self.velocity.get(name)
        v = grad if v is None else self.momentum * v + grad
        self.velocity[name] = v
        param -= self.lr * v


def cosine_lr(base_lr, epoch, total_epochs):
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * epoch / total_epochs))


def _epoch_layer_stats(model, mode):
    stats, zeros, total, bits_sum = [], 0, 0, 0.0
    for layer in model.layers:
        if mode == "fp32":
            sp = sparsity(layer.weight)
            stats.append(LayerEpochStats(layer.name, layer.spec.kind, sp,
                                         0.0, 0.0, 32,
                                         layer.state.theta_dz,
                                         layer.state.theta_bit))
            zeros += int(np.count_nonzero(layer.weight == 0))
            bits_sum += 32
        else:
            outcome = layer_outcome(layer)
            sp = sparsity(outcome.w_hat.value)
            stats.append(LayerEpochStats(layer.name, layer.spec.kind, sp,
                                         outcome.deadzone,
                                         outcome.scale, outcome.bits,
                                         layer.state.theta_dz,
                                         layer.state.theta_bit))
            zeros += int(np.count_nonzero(outcome.w_hat.value == 0))
            bits_sum += outcome.bits
        total += layer.weight.size
    return stats, zeros / total, bits_sum / len(model.layers)


def train(model, train_set, cfg, val_set=None):
    """Train in place; returns (model, per-epoch stats list).

    Determinism: identical model/config/datasets give identical results.
    Aborts with DivergenceError as soon as the loss turns non-finite.
    """
    mode = "fp32" if cfg.fp32 else "quant"
    if mode == "quant":
        init_quant_states(model, cfg)
    weight_opt = SgdMomentum(cfg.lr_weights, cfg.momentum)
    history = []

    for epoch in range(cfg.epochs):
        lr_w = cosine_lr(cfg.lr_weights, epoch, cfg.epochs) if cfg.cosine_lr \
            else cfg.lr_weights
        weight_opt.lr = lr_w
        loss_sum, step_count = 0.0, 0
        shuffle_seed = cfg.seed * 100003 + epoch
        for step, (xb, yb) in enumerate(batches(train_set, cfg.batch_size,
                                                shuffle_seed)):
            tape = Tape()
            fp = run_forward(model, xb, mode, tape, requires_grad=True)
            task = softmax_cross_entropy(fp.logits, yb)
            loss = regularized_loss(task, fp.weights, fp.theta_dz,
                                    fp.theta_bit, cfg)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise DivergenceError(
                    f"non-finite loss {loss_val} at epoch {epoch} step {step} "
                    f"(lr_weights {lr_w:g}, lr_theta {cfg.lr_theta:g})",
                    epoch=epoch, step=step, loss=loss_val)
            backward(loss)
            for i, layer in enumerate(model.layers):
                weight_opt.step(f"w{i}", layer.weight, fp.weights[i].grad)
                weight_opt.step(f"b{i}", layer.bias, fp.biases[i].grad)
                if fp.theta_dz[i] is not None:
                    layer.state.theta_dz -= cfg.lr_theta * float(fp.theta_dz[i].grad)
                if fp.theta_bit[i] is not None:
                    layer.state.theta_bit -= cfg.lr_theta * float(fp.theta_bit[i].grad)
            loss_sum += loss_val
            step_count += 1

        layer_stats, overall, mean_bits = _epoch_layer_stats(model, mode)
        train_acc = accuracy(model, train_set, mode)
        val_acc = accuracy(model, val_set, mode) if val_set is not None \
            else train_acc
        history.append(EpochStats(
            epoch=epoch, lr_weights=lr_w, train_acc=train_acc, val_acc=val_acc,
            loss=loss_sum / max(step_count, 1), overall_sparsity=overall,
            mean_bits=mean_bits, layers=layer_stats))
    return model, history


def effective_bits(state):
    """Integer bit count a state currently quantizes to."""
    if not state.mixed:
        return state.fixed_bits
    tape = Tape()
    bits, _ = learnable_bit(tape.const(state.theta_bit), state.b_min, state.b_max)
    return bits
