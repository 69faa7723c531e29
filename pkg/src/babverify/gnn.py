"""Small reverse-mode autodiff, MLPs, Adam and parameter files for the GNNs.

The GNN code is written once against a :class:`Graph`.  With
``record=False`` every op is a plain numpy computation; with ``record=True``
parameters become :class:`Var` leaves and :meth:`Graph.backward` returns
exact gradients for all of them.
"""

from __future__ import annotations

import base64
import json
import logging
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import ArchitectureMismatchError
from .serialization import dumps

logger = logging.getLogger(__name__)

PARAM_FORMAT = "babverify-params"
PARAM_VERSION = 1


# ---------------------------------------------------------------- autodiff

class Var:
    __slots__ = ("value", "grad", "parents", "backfn", "name")

    def __init__(self, value, parents=(), backfn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backfn = backfn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g


def _val(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Graph:
    """Op recorder over a fixed set of named parameters."""

    def __init__(self, params, record=False):
        self.params = params
        self.record = record
        self.nodes = []
        self._leaves = {}

    def param(self, name):
        value = self.params[name]
        if not self.record:
            return value
        if name not in self._leaves:
            self._leaves[name] = Var(value, name=name)
        return self._leaves[name]

    def _out(self, value, inputs, backfn):
        if not self.record or not any(isinstance(x, Var) for x in inputs):
            return value
        node = Var(value, tuple(inputs), backfn)
        self.nodes.append(node)
        return node

    # ops -----------------------------------------------------------------
    def linear(self, x, W, b=None):
        """``x @ W.T + b`` over the last axis."""
        xv, Wv = _val(x), _val(W)
        y = xv @ Wv.T
        if b is not None:
            y = y + _val(b)

        def back(g):
            if isinstance(x, Var):
                x.accumulate(g @ Wv)
            if isinstance(W, Var):
                W.accumulate(g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1]))
            if isinstance(b, Var):
                b.accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

        return self._out(y, (x, W) if b is None else (x, W, b), back)

    def nodemix(self, A, x):
        """Mix node embeddings with a constant matrix: ``A @ x`` on the node axis."""
        xv = _val(x)
        y = np.matmul(A, xv)

        def back(g):
            x.accumulate(np.matmul(A.T, g))

        return self._out(y, (x,), back)

    def add(self, a, b):
        av, bv = _val(a), _val(b)

        def back(g):
            if isinstance(a, Var):
                a.accumulate(_unbroadcast(g, av.shape))
            if isinstance(b, Var):
                b.accumulate(_unbroadcast(g, np.shape(bv)))

        return self._out(av + bv, (a, b), back)

    def sub(self, a, b):
        return self.add(a, self.scale(b, -1.0))

    def mul(self, a, b):
        av, bv = _val(a), _val(b)

        def back(g):
            if isinstance(a, Var):
                a.accumulate(_unbroadcast(g * bv, np.shape(av)))
            if isinstance(b, Var):
                b.accumulate(_unbroadcast(g * av, np.shape(bv)))

        return self._out(av * bv, (a, b), back)

    def scale(self, a, c):
        return self._out(_val(a) * c, (a,), lambda g: a.accumulate(g * c))

    def relu(self, a):
        av = _val(a)
        mask = av > 0.0
        return self._out(np.where(mask, av, 0.0), (a,), lambda g: a.accumulate(g * mask))

    def concat(self, parts, axis=-1):
        vals = [_val(p) for p in parts]
        y = np.concatenate(vals, axis=axis)
        sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def back(g):
            for p, gp in zip(parts, np.split(g, sizes, axis=axis)):
                if isinstance(p, Var):
                    p.accumulate(gp)

        return self._out(y, tuple(parts), back)

    def dot(self, x, v):
        """Contract the last axis of ``x`` with the vector ``v``."""
        xv, vv = _val(x), _val(v)

        def back(g):
            if isinstance(x, Var):
                x.accumulate(g[..., None] * vv)
            if isinstance(v, Var):
                v.accumulate((g[..., None] * xv).reshape(-1, xv.shape[-1]).sum(axis=0))

        return self._out(xv @ vv, (x, v), back)

    def sum(self, a):
        av = _val(a)
        return self._out(np.asarray(av.sum()), (a,), lambda g: a.accumulate(np.broadcast_to(g, av.shape).copy()))

    def gather(self, a, idx, axis=-1):
        av = _val(a)
        idx = np.asarray(idx)

        def back(g):
            full = np.zeros_like(av)
            np.add.at(full, (slice(None),) * (axis % av.ndim) + (idx,), g)
            a.accumulate(full)

        return self._out(np.take(av, idx, axis=axis), (a,), back)

    def backward(self, out, seed=None):
        """Reverse sweep from ``out``; returns ``{name: gradient}`` for every parameter."""
        if not self.record:
            raise RuntimeError("graph was built with record=False")
        if not isinstance(out, Var):
            raise RuntimeError("no recorded computation reaches this output")
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backfn is not None:
                node.backfn(node.grad)
        grads = {name: np.zeros_like(v) for name, v in self.params.items()}
        for name, leaf in self._leaves.items():
            if leaf.grad is not None:
                grads[name] = leaf.grad
        return grads


# ---------------------------------------------------------------- parameters

class Params:
    """Named float64 tensors plus architecture metadata."""

    def __init__(self, variant, meta, tensors):
        self.variant = variant
        self.meta = dict(meta)
        self.tensors = OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in tensors.items())

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def keys(self):
        return self.tensors.keys()

    def copy(self):
        return Params(self.variant, self.meta, {k: v.copy() for k, v in self.tensors.items()})

    def num_parameters(self):
        return int(sum(v.size for v in self.tensors.values()))

    def to_json(self):
        tensors = []
        for name, arr in self.tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            tensors.append({"name": name, "shape": list(arr.shape),
                            "data": base64.b64encode(raw).decode("ascii")})
        return {"format": PARAM_FORMAT, "version": PARAM_VERSION, "variant": self.variant,
                "meta": self.meta, "tensors": tensors}

    @classmethod
    def from_json(cls, obj):
        if obj.get("format") != PARAM_FORMAT or obj.get("version") != PARAM_VERSION:
            raise ArchitectureMismatchError("not a parameter file of a supported version")
        tensors = OrderedDict()
        for item in obj["tensors"]:
            raw = base64.b64decode(item["data"])
            tensors[item["name"]] = np.frombuffer(raw, dtype="<f8").reshape(item["shape"]).astype(np.float64)
        return cls(obj["variant"], obj["meta"], tensors)


def uniform_init(rng, fan_out, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def save_params(params: Params, path):
    Path(path).write_text(dumps(params.to_json()) + "\n", encoding="utf-8")


def load_params(path, variant=None, meta=None):
    """Read a parameter file; ``variant``/``meta`` entries must match when given."""
    with open(path, "r", encoding="utf-8") as fh:
        params = Params.from_json(json.load(fh))
    if variant is not None and params.variant != variant:
        raise ArchitectureMismatchError(f"file holds {params.variant!r} parameters, expected {variant!r}")
    for key, value in (meta or {}).items():
        if params.meta.get(key) != value:
            raise ArchitectureMismatchError(f"metadata {key}={params.meta.get(key)!r}, expected {value!r}")
    return params


# ---------------------------------------------------------------- MLPs

def mlp_params(rng, prefix, sizes):
    """Tensors for an MLP with layer widths ``sizes`` (input first)."""
    out = OrderedDict()
    for i in range(len(sizes) - 1):
        out[f"{prefix}.w{i}"] = uniform_init(rng, sizes[i + 1], sizes[i])
        bound = 1.0 / np.sqrt(sizes[i])
        out[f"{prefix}.b{i}"] = rng.uniform(-bound, bound, size=sizes[i + 1])
    return out


def mlp_forward(g: Graph, prefix, x, depth):
    """Linear layers ``prefix.w0 .. w{depth-1}`` with ReLU in between."""
    h = x
    for i in range(depth):
        if i:
            h = g.relu(h)
        h = g.linear(h, g.param(f"{prefix}.w{i}"), g.param(f"{prefix}.b{i}"))
    return h


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: Params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.skipped = 0

    def step(self, params: Params, grads):
        """Apply one update in place; returns False (and skips) on non-finite gradients."""
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            logger.warning("non-finite gradient; Adam step skipped")
            return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            params[name] = params[name] - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
        return True


def add_grads(a, b, scale=1.0):
    return {k: a[k] + scale * b[k] for k in a}
