"""Small dense networks in numpy: forward pass, tape-based backprop, Adam.

Inputs may be a single vector ``(in,)`` or a batch ``(batch, in)``. Gradients
for a batch are summed over rows, so callers fold any averaging into the
output gradient they pass to :func:`backward`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")
CHECKPOINT_MAGIC = b"DKNET\n"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Non-finite gradients, losses or parameters during training."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str


class DenseNet:
    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("a DenseNet needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise ValueError(f"layer {i}: bias shape does not match weight rows")
            if i and layers[i - 1].weight.shape[0] != layer.weight.shape[1]:
                raise ValueError(f"layer {i}: input dim does not chain from previous layer")
        # all parameters live in one flat buffer; layer arrays are views into it
        sizes = [l.weight.size + l.bias.size for l in layers]
        self.flat = np.empty(sum(sizes))
        offset = 0
        for layer in layers:
            w_end = offset + layer.weight.size
            b_end = w_end + layer.bias.size
            self.flat[offset:w_end] = layer.weight.ravel()
            self.flat[w_end:b_end] = layer.bias
            layer.weight = self.flat[offset:w_end].reshape(layer.weight.shape)
            layer.bias = self.flat[w_end:b_end]
            offset = b_end
        self.layers = layers
        self.version = 0

    @classmethod
    def init(cls, sizes: list[int], activations: list[str], rng: np.random.Generator) -> DenseNet:
        """Glorot-uniform weights, zero biases. ``sizes`` includes input and output dims."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Layer(rng.uniform(-limit, limit, (fan_out, fan_in)), np.zeros(fan_out), act))
        return cls(layers)

    @classmethod
    def mlp(cls, in_dim: int, out_dim: int, rng: np.random.Generator, hidden: int = 128, depth: int = 2,
            activation: str = "tanh") -> DenseNet:
        sizes = [in_dim] + [hidden] * depth + [out_dim]
        return cls.init(sizes, [activation] * depth + ["identity"], rng)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> DenseNet:
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return predict(self, x)


@dataclass
class Tape:
    net: DenseNet
    version: int
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    pre: list[np.ndarray]


@dataclass
class GradientSet:
    """Per-layer gradients, stored as views into one flat vector laid out like ``DenseNet.flat``."""

    flat: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, net: DenseNet) -> GradientSet:
        flat = np.zeros_like(net.flat)
        weights, biases, offset = [], [], 0
        for layer in net.layers:
            w_end = offset + layer.weight.size
            b_end = w_end + layer.bias.size
            weights.append(flat[offset:w_end].reshape(layer.weight.shape))
            biases.append(flat[w_end:b_end])
            offset = b_end
        return cls(flat, weights, biases)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def scale_(self, factor: float) -> GradientSet:
        self.flat *= factor
        return self

    def norm(self) -> float:
        return float(np.sqrt(self.flat @ self.flat))


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _check_input(net: DenseNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise ValueError(f"expected input of length {net.input_dim}, got shape {x.shape}")
    return x


def predict(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Forward pass without recording a tape."""
    h = _check_input(net, x)
    for layer in net.layers:
        z = layer.weight @ h + layer.bias if h.ndim == 1 else h @ layer.weight.T + layer.bias
        h = _activate(z, layer.activation)
    return h


def forward(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    h = _check_input(net, x)
    inputs, outputs, pre = [], [], []
    for layer in net.layers:
        inputs.append(h)
        z = layer.weight @ h + layer.bias if h.ndim == 1 else h @ layer.weight.T + layer.bias
        h = _activate(z, layer.activation)
        pre.append(z)
        outputs.append(h)
    return h, Tape(net, net.version, inputs, outputs, pre)


def backward(net: DenseNet, tape: Tape, output_gradient: np.ndarray) -> GradientSet:
    """Chain rule through the recorded tape; also returns the gradient w.r.t. the input."""
    if tape.net is not net or tape.version != net.version:
        raise ValueError("tape was recorded for a different or since-updated network")
    g = np.asarray(output_gradient, dtype=float)
    if g.shape != tape.outputs[-1].shape:
        raise ValueError(f"output gradient shape {g.shape} != output shape {tape.outputs[-1].shape}")
    grads = GradientSet.zeros_like(net)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "tanh":
            g = g * (1.0 - tape.outputs[i] ** 2)
        elif layer.activation == "relu":
            g = g * (tape.pre[i] > 0)
        inp = tape.inputs[i]
        if g.ndim == 1:
            np.outer(g, inp, out=grads.weights[i])
            grads.biases[i][:] = g
            g = layer.weight.T @ g
        else:
            np.matmul(g.T, inp, out=grads.weights[i])
            g.sum(axis=0, out=grads.biases[i])
            g = g @ layer.weight
    grads.input = g
    return grads


def clip_grad_norm(grads: GradientSet, max_norm: float | None) -> GradientSet:
    if max_norm is None:
        return grads
    norm = grads.norm()
    if norm > max_norm:
        grads.scale_(max_norm / (norm + 1e-12))
    return grads


@dataclass
class OptimizerState:
    """Adam moments for one network, flat like ``DenseNet.flat``."""

    lr: float
    first: np.ndarray
    second: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: DenseNet, lr: float) -> OptimizerState:
        return cls(lr, np.zeros_like(net.flat), np.zeros_like(net.flat))


def apply_update(opt: OptimizerState, net: DenseNet, grads: GradientSet) -> tuple[DenseNet, OptimizerState]:
    """One in-place Adam step on ``net``; raises TrainingError on non-finite gradients."""
    g = grads.flat
    if g.shape != net.flat.shape or opt.first.shape != net.flat.shape:
        raise ValueError("gradient/optimizer shapes do not match network parameters")
    if not np.isfinite(g).all():
        raise TrainingError("non-finite gradient")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    m, v = opt.first, opt.second
    tmp = np.multiply(g, 1.0 - b1)
    m *= b1
    m += tmp
    np.multiply(g, g, out=tmp)
    tmp *= 1.0 - b2
    v *= b2
    v += tmp
    # p -= lr * m_hat / (sqrt(v_hat) + eps), without temporaries
    np.sqrt(v, out=tmp)
    tmp *= 1.0 / np.sqrt(1.0 - b2**opt.step)
    tmp += opt.eps
    np.divide(m, tmp, out=tmp)
    tmp *= opt.lr / (1.0 - b1**opt.step)
    net.flat -= tmp
    net.version += 1
    return net, opt


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -(p * logs).sum(axis=-1)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    p = np.asarray(probs, dtype=float)
    cum = np.cumsum(p)
    total = cum[-1]
    if not total > 0 or p.min() < 0:
        raise ValueError("probabilities must be non-negative with at least one positive entry")
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {total}, not 1")
    idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
    idx = min(idx, len(p) - 1)
    # rounding can land on a trailing zero-probability entry
    while p[idx] == 0:
        idx -= 1
    return idx


def save_checkpoint(path: str | Path, nets: Mapping[str, DenseNet], meta: dict | None = None) -> None:
    """Write networks as a magic line, one JSON header line, then raw float64 data.

    The header lists every tensor as ``{"name", "shape", "dtype"}`` in the
    order its little-endian bytes follow, so loading reproduces the
    parameters bit for bit.
    """
    tensors, blobs, activations = [], [], {}
    for name, net in nets.items():
        activations[name] = [layer.activation for layer in net.layers]
        for i, layer in enumerate(net.layers):
            for part, arr in (("weight", layer.weight), ("bias", layer.bias)):
                data = np.ascontiguousarray(arr, dtype="<f8")
                tensors.append({"name": f"{name}/{i}/{part}", "shape": list(data.shape), "dtype": "<f8"})
                blobs.append(data.tobytes())
    header = {"format_version": CHECKPOINT_VERSION, "meta": meta or {}, "activations": activations,
              "tensors": tensors}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, DenseNet], dict]:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a network checkpoint")
        header = json.loads(fh.readline())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        arrays = {}
        for spec in header["tensors"]:
            count = int(np.prod(spec["shape"]))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype=spec["dtype"]).reshape(spec["shape"]).astype(float)
    nets = {}
    for name, acts in header["activations"].items():
        layers = [Layer(arrays[f"{name}/{i}/weight"], arrays[f"{name}/{i}/bias"], act) for i, act in enumerate(acts)]
        nets[name] = DenseNet(layers)
    return nets, header["meta"]
