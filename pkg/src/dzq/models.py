"""Small reference models (MLP, mini CNN), forward passes and checkpoints.

A model is an ordered stack of weight layers.  The forward topology follows
from the layer kinds alone: every conv layer runs as conv -> relu -> 2x2
max-pool, the activations are flattened before the first linear layer, and
relu sits between consecutive linear layers but not after the last one.
Biases stay full precision in every mode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    Tape,
    TensorNode,
    conv2d,
    matmul,
    maxpool2,
    relu,
    reshape,
)
from .errors import FormatError
from .quantizers import LayerQuantState, QuantOutcome, quantize_layer

CHECKPOINT_MAGIC = b"CDQ1"
FORWARD_MODES = ("fp32", "quant")


@dataclass(frozen=True)
class LayerSpec:
    """Static shape description of one weight layer."""

    kind: str                      # "linear" | "conv2d"
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = (0, 0)
    stride: int = 1
    padding: int = 0
    out_size: tuple = (0, 0)       # spatial map a conv layer produces

    def weight_shape(self):
        if self.kind == "linear":
            return (self.in_features, self.out_features)
        return (self.out_channels, self.in_channels) + tuple(self.kernel)

    def bias_size(self):
        return self.out_features if self.kind == "linear" else self.out_channels

    def weight_count(self):
        n = 1
        for dim in self.weight_shape():
            n *= dim
        return n


@dataclass
class Layer:
    name: str
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray
    state: LayerQuantState = field(default_factory=LayerQuantState)


@dataclass
class Model:
    input_shape: tuple
    layers: list
    activation: str = "relu"

    @property
    def num_classes(self):
        return self.layers[-1].spec.out_features


@dataclass
class ForwardPass:
    """Graph handles needed to train on one batch."""

    logits: TensorNode
    weights: list
    biases: list
    theta_dz: list
    theta_bit: list
    outcomes: list


def _conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def validate_model(model):
    """Check that the layer stack chains together from the input shape."""
    if not model.layers:
        raise ValueError("model has no layers")
    if model.activation != "relu":
        raise ValueError(f"unsupported activation {model.activation!r}")
    shape = tuple(model.input_shape)
    flat = None
    for layer in model.layers:
        spec = layer.spec
        if layer.weight.shape != spec.weight_shape():
            raise ValueError(f"{layer.name}: weight shape {layer.weight.shape} "
                             f"does not match spec {spec.weight_shape()}")
        if layer.bias.shape != (spec.bias_size(),):
            raise ValueError(f"{layer.name}: bad bias shape {layer.bias.shape}")
        if spec.kind == "conv2d":
            if flat is not None:
                raise ValueError(f"{layer.name}: conv after flatten")
            if len(shape) != 3 or shape[0] != spec.in_channels:
                raise ValueError(f"{layer.name}: expects {spec.in_channels} "
                                 f"channels, input shape is {shape}")
            oh = _conv_out(shape[1], spec.kernel[0], spec.stride, spec.padding)
            ow = _conv_out(shape[2], spec.kernel[1], spec.stride, spec.padding)
            if (oh, ow) != tuple(spec.out_size):
                raise ValueError(f"{layer.name}: spec says output {spec.out_size}, "
                                 f"got {(oh, ow)}")
            shape = (spec.out_channels, oh // 2, ow // 2)  # pool follows conv
            if shape[1] == 0 or shape[2] == 0:
                raise ValueError(f"{layer.name}: pooled output is empty")
        elif spec.kind == "linear":
            if flat is None:
                flat = int(np.prod(shape))
            if flat != spec.in_features:
                raise ValueError(f"{layer.name}: expects {spec.in_features} "
                                 f"inputs, got {flat}")
            flat = spec.out_features
        else:
            raise ValueError(f"{layer.name}: unknown layer kind {spec.kind!r}")
    return model


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_mlp(input_dim, hidden_dims, num_classes, seed=0):
    """Fully-connected relu network; Kaiming-uniform weights, zero biases."""
    if input_dim < 1 or num_classes < 2:
        raise ValueError("need input_dim >= 1 and num_classes >= 2")
    rng = np.random.default_rng(seed)
    dims = [int(input_dim)] + [int(h) for h in hidden_dims] + [int(num_classes)]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        spec = LayerSpec(kind="linear", in_features=d_in, out_features=d_out)
        layers.append(Layer(
            name=f"fc{i}",
            spec=spec,
            weight=_kaiming_uniform(rng, (d_in, d_out), d_in),
            bias=np.zeros(d_out),
        ))
    return validate_model(Model(input_shape=(int(input_dim),), layers=layers))


def build_mini_cnn(input_shape, num_classes, seed=0):
    """conv(16,3x3) -> relu -> pool2 -> conv(32,3x3) -> relu -> pool2 -> linear."""
    if len(input_shape) != 3:
        raise ValueError("input_shape must be (channels, height, width)")
    c, h, w = (int(v) for v in input_shape)
    rng = np.random.default_rng(seed)
    layers = []
    channels = c
    for i, out_c in enumerate((16, 32)):
        oh, ow = _conv_out(h, 3, 1, 0), _conv_out(w, 3, 1, 0)
        spec = LayerSpec(kind="conv2d", in_channels=channels, out_channels=out_c,
                         kernel=(3, 3), stride=1, padding=0, out_size=(oh, ow))
        fan_in = channels * 9
        layers.append(Layer(
            name=f"conv{i}",
            spec=spec,
            weight=_kaiming_uniform(rng, (out_c, channels, 3, 3), fan_in),
            bias=np.zeros(out_c),
        ))
        channels, h, w = out_c, oh // 2, ow // 2
    flat = channels * h * w
    spec = LayerSpec(kind="linear", in_features=flat, out_features=int(num_classes))
    layers.append(Layer(
        name="fc0",
        spec=spec,
        weight=_kaiming_uniform(rng, (flat, num_classes), flat),
        bias=np.zeros(int(num_classes)),
    ))
    return validate_model(Model(input_shape=(c, int(input_shape[1]),
                                             int(input_shape[2])), layers=layers))


def run_forward(model, batch, mode="quant", tape=None, requires_grad=False):
    """Run the model on a batch, returning the graph handles.

    mode "fp32" uses the raw weights; "quant" routes every weight layer
    through its dead-zone quantizer.  Pure in the model: nothing is mutated.
    """
    if mode not in FORWARD_MODES:
        raise ValueError(f"unknown forward mode {mode!r}")
    if tape is None:
        tape = Tape()
    batch = np.asarray(batch, dtype=np.float64)
    n = batch.shape[0]
    x = tape.const(batch.reshape((n,) + tuple(model.input_shape)))

    weights, biases, t_dz, t_bit, outcomes = [], [], [], [], []
    flattened = len(model.input_shape) == 1
    if flattened:
        x = reshape(x, (n, model.input_shape[0]))
    previous_linear = False

    for layer in model.layers:
        w_node = tape.tensor(layer.weight, requires_grad=requires_grad)
        b_node = tape.tensor(layer.bias, requires_grad=requires_grad)
        weights.append(w_node)
        biases.append(b_node)
        if mode == "quant":
            th_dz = tape.tensor(layer.state.theta_dz, requires_grad=requires_grad)
            th_bit = None
            if layer.state.mixed:
                th_bit = tape.tensor(layer.state.theta_bit,
                                     requires_grad=requires_grad)
            outcome = quantize_layer(w_node, layer.state, th_dz, th_bit)
            w_used = outcome.w_hat
        else:
            th_dz, th_bit, outcome = None, None, None
            w_used = w_node
        t_dz.append(th_dz)
        t_bit.append(th_bit)
        outcomes.append(outcome)

        if layer.spec.kind == "conv2d":
            x = conv2d(x, w_used, layer.spec.stride, layer.spec.padding)
            x = x + reshape(b_node, (1, layer.spec.out_channels, 1, 1))
            x = relu(x)
            x = maxpool2(x)
        else:
            if not flattened:
                x = reshape(x, (n, layer.spec.in_features))
                flattened = True
            if previous_linear:
                x = relu(x)
            x = matmul(x, w_used) + b_node
            previous_linear = True

    return ForwardPass(logits=x, weights=weights, biases=biases,
                       theta_dz=t_dz, theta_bit=t_bit, outcomes=outcomes)


def forward(model, batch, mode="quant"):
    """Logits for a batch as a plain array (no gradients recorded)."""
    return run_forward(model, batch, mode).logits.value


def accuracy(model, dataset, mode="quant", batch_size=512):
    """Fraction of samples whose argmax logit matches the label."""
    hits = 0
    n = dataset.features.shape[0]
    for start in range(0, n, batch_size):
        chunk = dataset.features[start : start + batch_size]
        labels = dataset.labels[start : start + batch_size]
        hits += int((forward(model, chunk, mode).argmax(axis=1) == labels).sum())
    return hits / n


def layer_outcome(layer):
    """Quantize a layer's current weights on a throwaway tape."""
    tape = Tape()
    return quantize_layer(tape.const(layer.weight), layer.state)


# ---------------------------------------------------------------------------
# checkpoint format: "CDQ1" magic, forward-mode byte, input shape, layer count,
# then per layer: kind, name, dims, quantizer state, raw float64-LE arrays.

_KINDS = {"linear": 0, "conv2d": 1}
_KINDS_BACK = {v: k for k, v in _KINDS.items()}


def _pack_array(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(model, path, mode="quant"):
    if mode not in FORWARD_MODES:
        raise ValueError(f"unknown forward mode {mode!r}")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<B", FORWARD_MODES.index(mode))
    out += struct.pack("<B", len(model.input_shape))
    for dim in model.input_shape:
        out += struct.pack("<I", dim)
    out += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        spec, state = layer.spec, layer.state
        out += struct.pack("<B", _KINDS[spec.kind])
        name = layer.name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        if spec.kind == "linear":
            out += struct.pack("<II", spec.in_features, spec.out_features)
        else:
            out += struct.pack("<8I", spec.in_channels, spec.out_channels,
                               spec.kernel[0], spec.kernel[1], spec.stride,
                               spec.padding, spec.out_size[0], spec.out_size[1])
        out += struct.pack("<d", state.theta_dz)
        out += struct.pack("<Bd", int(state.theta_bit is not None),
                           state.theta_bit if state.theta_bit is not None else 0.0)
        out += struct.pack("<BBB", state.fixed_bits or 0, state.b_min, state.b_max)
        out += struct.pack("<ddB", state.quantile, state.epsilon,
                           int(state.detach_scale_from_d))
        out += _pack_array(layer.weight)
        out += _pack_array(layer.bias)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        values = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return values

    def take_array(self, count, shape):
        size = 8 * count
        if self.pos + size > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        arr = np.frombuffer(self.blob, dtype="<f8", count=count,
                            offset=self.pos).astype(np.float64).reshape(shape)
        self.pos += size
        return arr


def load_checkpoint(path):
    """Read a checkpoint; returns (model, forward_mode)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    magic = bytes(r.take("<4s")[0])
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}, "
                          f"expected {CHECKPOINT_MAGIC!r}")
    mode_idx = r.take("<B")[0]
    if mode_idx >= len(FORWARD_MODES):
        raise FormatError(f"{path}: unknown forward mode byte {mode_idx}")
    ndim = r.take("<B")[0]
    input_shape = tuple(r.take("<I")[0] for _ in range(ndim))
    n_layers = r.take("<I")[0]
    if n_layers == 0:
        raise FormatError(f"{path}: checkpoint contains no layers")
    layers = []
    for _ in range(n_layers):
        kind_idx = r.take("<B")[0]
        if kind_idx not in _KINDS_BACK:
            raise FormatError(f"{path}: unknown layer kind byte {kind_idx}")
        kind = _KINDS_BACK[kind_idx]
        name_len = r.take("<H")[0]
        if r.pos + name_len > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        name = blob[r.pos : r.pos + name_len].decode("utf-8")
        r.pos += name_len
        if kind == "linear":
            in_f, out_f = r.take("<II")
            spec = LayerSpec(kind="linear", in_features=in_f, out_features=out_f)
        else:
            ic, oc, kh, kw, stride, pad, oh, ow = r.take("<8I")
            spec = LayerSpec(kind="conv2d", in_channels=ic, out_channels=oc,
                             kernel=(kh, kw), stride=stride, padding=pad,
                             out_size=(oh, ow))
        theta_dz = r.take("<d")[0]
        has_bit, theta_bit = r.take("<Bd")
        fixed_bits, b_min, b_max = r.take("<BBB")
        quantile, epsilon, detach = r.take("<ddB")
        state = LayerQuantState(
            theta_dz=theta_dz,
            theta_bit=theta_bit if has_bit else None,
            fixed_bits=None if has_bit else int(fixed_bits),
            b_min=b_min, b_max=b_max, quantile=quantile, epsilon=epsilon,
            detach_scale_from_d=bool(detach),
        )
        weight = r.take_array(spec.weight_count(), spec.weight_shape())
        bias = r.take_array(spec.bias_size(), (spec.bias_size(),))
        layers.append(Layer(name=name, spec=spec, weight=weight, bias=bias,
                            state=state))
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    model = validate_model(Model(input_shape=input_shape, layers=layers))
    return model, FORWARD_MODES[mode_idx]
