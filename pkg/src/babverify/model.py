"""Networks, input domains and robustness properties.

A :class:`VerificationNetwork` is a sequence of affine layers with an
implicit ReLU between consecutive layers and none after the last one.  The
last layer has a single output, so verifying a property means checking that
the minimum of the network over the input box is non-negative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError


def _conv_out_hw(h, w, k_h, k_w, stride, padding):
    return (h + 2 * padding - k_h) // stride + 1, (w + 2 * padding - k_w) // stride + 1


@dataclass(eq=False)
class Layer:
    kind: str
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    in_shape: Optional[tuple] = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.kind == "dense":
            if self.weights.ndim != 2:
                raise ShapeError("dense weights must be a matrix")
            if self.bias.shape[0] != self.weights.shape[0]:
                raise ShapeError("dense bias length must equal the number of output units")
        elif self.kind == "conv2d":
            if self.weights.ndim != 4:
                raise ShapeError("conv2d kernel must be 4-D (c_out, c_in, k_h, k_w)")
            if self.in_shape is None or len(self.in_shape) != 3:
                raise ShapeError("conv2d layers need in_shape = (c, h, w)")
            self.in_shape = tuple(int(s) for s in self.in_shape)
            if self.in_shape[0] != self.weights.shape[1]:
                raise ShapeError("conv2d kernel input channels do not match in_shape")
            if self.bias.shape[0] != self.weights.shape[0]:
                raise ShapeError("conv2d bias must have one entry per output channel")
            if self.stride < 1 or self.padding < 0:
                raise ShapeError("invalid stride/padding")
            oh, ow = self.out_shape[1:]
            if oh < 1 or ow < 1:
                raise ShapeError("conv2d output would be empty")
        else:
            raise ShapeError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def dense(cls, weights, bias):
        return cls("dense", weights, bias)

    @classmethod
    def conv2d(cls, kernel, bias, in_shape, stride=1, padding=0):
        return cls("conv2d", kernel, bias, stride=int(stride), padding=int(padding),
                   in_shape=tuple(in_shape))

    @property
    def out_shape(self):
        if self.kind == "dense":
            return (self.weights.shape[0],)
        c_out, _, k_h, k_w = self.weights.shape
        return (c_out,) + _conv_out_hw(self.in_shape[1], self.in_shape[2], k_h, k_w,
                                       self.stride, self.padding)

    @property
    def in_dim(self):
        if self.kind == "dense":
            return self.weights.shape[1]
        return int(np.prod(self.in_shape))

    @property
    def out_dim(self):
        return int(np.prod(self.out_shape))

    def forward(self, x):
        """Apply the layer to ``x`` of shape ``(in_dim,)`` or ``(batch, in_dim)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected input dimension {self.in_dim}, got {x.shape[-1]}")
        if self.kind == "dense":
            return x @ self.weights.T + self.bias
        lead = x.shape[:-1]
        img = x.reshape((-1,) + self.in_shape)
        out = _conv2d_native(img, self.weights, self.stride, self.padding)
        out += self.bias[None, :, None, None]
        return out.reshape(lead + (self.out_dim,))

    @cached_property
    def _linear_view(self):
        if self.kind == "dense":
            return self.weights, self.bias
        return conv_as_linear(self)

    def linear(self):
        """Explicit ``(W, b)`` such that the layer computes ``W @ x + b``."""
        return self._linear_view

    @cached_property
    def connectivity(self):
        """Boolean ``(out_dim, in_dim)`` mask of structural edges."""
        if self.kind == "dense":
            return np.ones(self.weights.shape, dtype=bool)
        ones = Layer.conv2d(np.ones_like(self.weights), np.zeros_like(self.bias), self.in_shape,
                            self.stride, self.padding)
        return conv_as_linear(ones)[0] != 0.0

    def to_json(self):
        if self.kind == "dense":
            return {"kind": "dense", "weights": self.weights.tolist(), "bias": self.bias.tolist()}
        return {"kind": "conv2d", "kernel": self.weights.tolist(), "stride": self.stride,
                "padding": self.padding, "in_shape": list(self.in_shape), "bias": self.bias.tolist()}

    @classmethod
    def from_json(cls, obj):
        kind = obj.get("kind")
        if kind == "dense":
            return cls.dense(obj["weights"], obj["bias"])
        if kind == "conv2d":
            return cls.conv2d(obj["kernel"], obj["bias"], obj["in_shape"],
                              obj.get("stride", 1), obj.get("padding", 0))
        raise ShapeError(f"unknown layer kind {kind!r}")


def _conv2d_native(img, kernel, stride, padding):
    n, c_in, h, w = img.shape
    c_out, _, k_h, k_w = kernel.shape
    oh, ow = _conv_out_hw(h, w, k_h, k_w, stride, padding)
    padded = np.pad(img, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, c_out, oh, ow))
    for a in range(k_h):
        for b in range(k_w):
            patch = padded[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride]
            out += np.einsum("ncij,oc->noij", patch, kernel[:, :, a, b])
    return out


def conv_as_linear(layer: Layer):
    """Materialize a conv2d layer as an explicit matrix and bias vector."""
    if layer.kind != "conv2d":
        raise ShapeError("conv_as_linear expects a conv2d layer")
    c_in, h, w = layer.in_shape
    c_out, _, k_h, k_w = layer.weights.shape
    _, oh, ow = layer.out_shape
    s, p = layer.stride, layer.padding
    mat = np.zeros((c_out * oh * ow, c_in * h * w))
    oc, oi, oj, ic, a, b = np.meshgrid(np.arange(c_out), np.arange(oh), np.arange(ow),
                                       np.arange(c_in), np.arange(k_h), np.arange(k_w),
                                       indexing="ij")
    ii = oi * s - p + a
    jj = oj * s - p + b
    ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
    rows = ((oc * oh + oi) * ow + oj)[ok]
    cols = ((ic * h + ii) * w + jj)[ok]
    np.add.at(mat, (rows, cols), layer.weights[oc[ok], ic[ok], a[ok], b[ok]])
    bias = np.repeat(layer.bias, oh * ow)
    return mat, bias


class VerificationNetwork:
    """Alternating affine/ReLU layers ending in a single affine output."""

    def __init__(self, layers: Sequence[Layer]):
        layers = tuple(layers)
        if len(layers) < 2:
            raise ShapeError("a verification network needs at least two layers")
        for i in range(len(layers) - 1):
            if layers[i].out_dim != layers[i + 1].in_dim:
                raise ShapeError(f"layer {i} output dim {layers[i].out_dim} != "
                                 f"layer {i + 1} input dim {layers[i + 1].in_dim}")
        if layers[-1].out_dim != 1:
            raise ShapeError("the final layer must have exactly one output")
        self.layers = layers

    @property
    def depth(self):
        return len(self.layers)

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def hidden_sizes(self):
        return [layer.out_dim for layer in self.layers[:-1]]

    @property
    def num_relus(self):
        return sum(self.hidden_sizes)

    def weights(self, k):
        return self.layers[k].linear()[0]

    def bias(self, k):
        return self.layers[k].linear()[1]

    def to_json(self):
        return {"layers": [layer.to_json() for layer in self.layers]}

    @classmethod
    def from_json(cls, obj):
        return cls([Layer.from_json(item) for item in obj["layers"]])

    def __repr__(self):
        dims = [self.input_dim] + [layer.out_dim for layer in self.layers]
        return f"VerificationNetwork({'-'.join(map(str, dims))})"


@dataclass
class InputDomain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64).reshape(-1)
        self.upper = np.asarray(self.upper, dtype=np.float64).reshape(-1)
        if self.lower.shape != self.upper.shape:
            raise ShapeError("domain bounds must have equal length")
        if np.any(self.lower > self.upper):
            raise ShapeError("domain lower bound exceeds upper bound")

    @property
    def dim(self):
        return self.lower.shape[0]

    def contains(self, x, tol=0.0):
        x = np.asarray(x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def clip(self, x):
        return np.clip(x, self.lower, self.upper)


@dataclass
class PropertySpec:
    network: VerificationNetwork  # base classifier; its output may be multi-dimensional
    label: int
    adv_label: int
    center: np.ndarray
    epsilon: float
    clip: Optional[tuple] = None
    network_path: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(-1)
        if self.label == self.adv_label:
            raise ValueError("label and adversarial label must differ")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


class BaseNetwork(VerificationNetwork):
    """Same layer stack as a verification network but with any output width."""

    def __init__(self, layers: Sequence[Layer]):
        layers = tuple(layers)
        if len(layers) < 1:
            raise ShapeError("empty network")
        for i in range(len(layers) - 1):
            if layers[i].out_dim != layers[i + 1].in_dim:
                raise ShapeError(f"layer {i} output dim does not match layer {i + 1} input dim")
        self.layers = layers

    @property
    def out_dim(self):
        return self.layers[-1].out_dim


def evaluate(net, x):
    """Exact forward pass; ``x`` may carry a leading batch dimension."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != net.input_dim:
        raise ShapeError(f"expected input dimension {net.input_dim}, got {h.shape[-1]}")
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        h = layer.forward(h)
        if k < last:
            h = np.maximum(h, 0.0)
    if net.layers[-1].out_dim != 1:
        return h
    return h[..., 0] if h.ndim > 1 else float(h[0])


def merge_property(prop: PropertySpec):
    """Fold the label difference into the last layer and build the input box."""
    base = prop.network
    out_dim = base.layers[-1].out_dim
    for lab in (prop.label, prop.adv_label):
        if not 0 <= lab < out_dim:
            raise ShapeError(f"label {lab} out of range for {out_dim} outputs")
    if prop.center.shape[0] != base.input_dim:
        raise ShapeError("center dimension does not match the network input")
    if prop.label == prop.adv_label:
        raise ValueError("label and adversarial label must differ")
    W, b = base.layers[-1].linear()
    diff = np.zeros(out_dim)
    diff[prop.label] = 1.0
    diff[prop.adv_label] = -1.0
    last = Layer.dense((diff @ W)[None, :], np.array([diff @ b]))
    net = VerificationNetwork(list(base.layers[:-1]) + [last])
    lower = prop.center - prop.epsilon
    upper = prop.center + prop.epsilon
    if prop.clip is not None:
        lo, hi = prop.clip
        lower = np.clip(lower, lo, hi)
        upper = np.clip(upper, lo, hi)
    return net, InputDomain(lower, upper)


def load_network(path, allow_multi_output=False):
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    layers = [Layer.from_json(item) for item in obj["layers"]]
    if allow_multi_output and layers[-1].out_dim != 1:
        return BaseNetwork(layers)
    return VerificationNetwork(layers)


def save_network(net, path):
    from .serialization import dumps

    Path(path).write_text(dumps(net.to_json()) + "\n", encoding="utf-8")


def load_property(path):
    """Read a property file; the network path is resolved relative to it."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    net_path = Path(obj["network"])
    if not net_path.is_absolute():
        net_path = path.parent / net_path
    base = load_network(net_path, allow_multi_output=True)
    clip = obj.get("clip")
    return PropertySpec(base, int(obj["label"]), int(obj["adv_label"]), obj["center"],
                        float(obj["epsilon"]), tuple(clip) if clip is not None else None,
                        network_path=str(obj["network"]))


def property_to_json(prop: PropertySpec, network_path):
    obj = {"network": str(network_path), "center": prop.center.tolist(), "epsilon": prop.epsilon,
           "label": prop.label, "adv_label": prop.adv_label}
    if prop.clip is not None:
        obj["clip"] = list(prop.clip)
    return obj
