"""Feature extractor and projection layer with analytic backpropagation.

The extractor is a stack of dense layers over flattened inputs; the last
layer is the projection ("reductor") that maps the d_a-dimensional
intermediate feature to the d_p-dimensional prototype feature, d_p < d_a.
Weights are stored (in_dim, out_dim) so a batch X of shape (B, in) maps
to X @ W + b.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FormatVersionMismatchError,
    NoForwardRecordedError,
    ShapeMismatchError,
)
from .numerics import matmul, relu

PARAMS_MAGIC = b"OFSC"
PARAMS_VERSION = 1

ACTIVATIONS = ("identity", "relu")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (in_dim, out_dim), float64
    bias: np.ndarray  # (out_dim,), float64
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeMismatchError("dense layer expects 2-D weight and 1-D bias")
        if self.weight.shape[1] != self.bias.shape[0]:
            raise ShapeMismatchError(
                f"bias length {self.bias.shape[0]} != weight cols {self.weight.shape[1]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ModelParams:
    """Dense layers plus the index separating extractor from projection.

    layers[:split_point] form the frozen-able extractor; layers[split_point:]
    are the projection (exactly one layer in every shipped configuration).
    forward_calls counts samples seen by the extractor; it instruments the
    single-pass contract of online learning and is not model state.
    """

    layers: list
    split_point: int
    forward_calls: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeMismatchError("model needs at least one layer")
        if not 0 < self.split_point <= len(self.layers):
            raise ShapeMismatchError(
                f"split_point {self.split_point} out of range for {len(self.layers)} layers"
            )
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeMismatchError("layer shapes do not chain")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def d_a(self) -> int:
        return self.layers[self.split_point - 1].weight.shape[1]

    @property
    def d_p(self) -> int:
        return self.layers[-1].weight.shape[1]


class GradientTape:
    """Forward-pass cache plus gradient buffers mirroring ModelParams.

    One tape records one forward chain; create a fresh tape per batch.
    """

    def __init__(self):
        self.records = []  # (layer_index, input batch, preactivation batch)
        self.grad_w = {}
        self.grad_b = {}
        self.input_grad = None

    @property
    def has_grads(self) -> bool:
        return bool(self.grad_w)

    def grads_for(self, params: ModelParams):
        for idx in range(len(params.layers)):
            layer = params.layers[idx]
            if idx not in self.grad_w:
                self.grad_w[idx] = np.zeros_like(layer.weight)
                self.grad_b[idx] = np.zeros_like(layer.bias)
        return self.grad_w, self.grad_b


def _as_batch(x):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ShapeMismatchError(f"expected vector or batch matrix, got shape {arr.shape}")


def _run_layers(params, x, start, stop, tape=None):
    a, squeeze = _as_batch(x)
    if start >= stop:  # degenerate segment (model with no projection layer)
        return a[0] if squeeze else a
    if a.shape[1] != params.layers[start].weight.shape[0]:
        raise ShapeMismatchError(
            f"input dim {a.shape[1]} != layer {start} fan-in "
            f"{params.layers[start].weight.shape[0]}"
        )
    for idx in range(start, stop):
        layer = params.layers[idx]
        z = matmul(a, layer.weight) + layer.bias
        if tape is not None:
            tape.records.append((idx, a, z))
        a = relu(z) if layer.activation == "relu" else z
    return a[0] if squeeze else a


def forward_backbone(params: ModelParams, x, tape: GradientTape | None = None):
    """Map input(s) to the intermediate feature theta_a.

    Accepts one vector or a (B, in_dim) batch; bumps the sample counter
    by the number of rows processed.
    """
    batch, _ = _as_batch(x)
    params.forward_calls += batch.shape[0]
    return _run_layers(params, x, 0, params.split_point, tape)


def forward_fcr(params: ModelParams, theta_a, tape: GradientTape | None = None):
    """Project the intermediate feature theta_a to the prototype feature theta_p."""
    return _run_layers(params, theta_a, params.split_point, len(params.layers), tape)


def backward(params, tape, upstream, frozen_backbone: bool = False):
    """Backpropagate upstream d(loss)/d(output) through the recorded chain.

    With frozen_backbone the walk stops at the projection boundary and
    extractor gradient buffers stay zero. Fills tape.grad_w / tape.grad_b
    (summed over the batch) and tape.input_grad, and returns the tape.
    """
    if not tape.records:
        raise NoForwardRecordedError("no forward pass recorded on this tape")
    grad_w, grad_b = tape.grads_for(params)
    g, squeeze = _as_batch(upstream)
    if g.shape != tape.records[-1][2].shape:
        raise ShapeMismatchError(
            f"upstream shape {g.shape} != last output shape {tape.records[-1][2].shape}"
        )
    for idx, a_in, z in reversed(tape.records):
        if frozen_backbone and idx < params.split_point:
            break
        layer = params.layers[idx]
        if layer.activation == "relu":
            g = g * (z > 0)
        grad_w[idx] += matmul(a_in.T, g)
        grad_b[idx] += g.sum(axis=0)
        g = matmul(g, layer.weight.T)
    tape.input_grad = g[0] if squeeze else g
    return tape


def sgd_step(params, tape, lr: float):
    """Apply w <- w - lr * grad for every buffered gradient."""
    if not tape.has_grads:
        raise NoForwardRecordedError("tape holds no gradients; run backward first")
    for idx, layer in enumerate(params.layers):
        if idx in tape.grad_w:
            layer.weight -= lr * tape.grad_w[idx]
            layer.bias -= lr * tape.grad_b[idx]
    return params


def init_model(layer_dims, split_point, seed, activations=None) -> ModelParams:
    """Glorot-uniform initialised network from a seeded generator.

    layer_dims = [in, h1, ..., d_a, d_p]; the final layer is the
    projection. Default activations: relu on extractor layers, identity
    on the projection.
    """
    if len(layer_dims) < 3:
        raise ShapeMismatchError("need at least [input, d_a, d_p] dims")
    n_layers = len(layer_dims) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["identity"]
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(n_layers):
        fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(DenseLayer(w, np.zeros(fan_out), activations[i]))
    params = ModelParams(layers, split_point)
    if params.d_p >= params.d_a:
        raise ShapeMismatchError(f"d_p ({params.d_p}) must be < d_a ({params.d_a})")
    return params


def params_checksum(params: ModelParams) -> bytes:
    """Concatenated little-endian bytes of all weights; equality = bitwise equality."""
    chunks = []
    for layer in params.layers:
        chunks.append(layer.weight.astype("<f8").tobytes())
        chunks.append(layer.bias.astype("<f8").tobytes())
    return b"".join(chunks)


_ACT_CODE = {"identity": 0, "relu": 1}
_ACT_NAME = {v: k for k, v in _ACT_CODE.items()}


def save_params(params: ModelParams, path):
    """Little-endian binary dump; round-trips bit-exactly."""
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<II", PARAMS_VERSION, len(params.layers)))
        for layer in params.layers:
            rows, cols = layer.weight.shape
            fh.write(struct.pack("<IIB", rows, cols, _ACT_CODE[layer.activation]))
        for layer in params.layers:
            fh.write(layer.weight.astype("<f8").tobytes())
            fh.write(layer.bias.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    """Inverse of save_params; the projection is the last layer by contract."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != PARAMS_MAGIC:
        raise FormatVersionMismatchError(f"{path}: bad magic")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != PARAMS_VERSION:
        raise FormatVersionMismatchError(f"{path}: unsupported version {version}")
    off = 12
    shapes = []
    for _ in range(n_layers):
        if off + 9 > len(blob):
            raise FormatVersionMismatchError(f"{path}: truncated layer table")
        rows, cols, act = struct.unpack_from("<IIB", blob, off)
        off += 9
        if act not in _ACT_NAME:
            raise FormatVersionMismatchError(f"{path}: unknown activation code {act}")
        shapes.append((rows, cols, _ACT_NAME[act]))
    layers = []
    for rows, cols, act in shapes:
        need = (rows * cols + cols) * 8
        if off + need > len(blob):
            raise FormatVersionMismatchError(f"{path}: truncated payload")
        w = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        off += rows * cols * 8
        b = np.frombuffer(blob, dtype="<f8", count=cols, offset=off)
        off += cols * 8
        layers.append(DenseLayer(w.copy(), b.copy(), act))
    return ModelParams(layers, split_point=len(layers) - 1)
