"""Intermediate bounds and per-neuron ReLU relaxation quantities.

Layer indices are zero-based: ``stack.lower[k]`` bounds the pre-activation
output of ``net.layers[k]``.  Hidden layers are ``k = 0 .. L-2`` and the
last entry of the stack bounds the scalar network output.

Splits are stored as one int8 vector per hidden layer with ``+1`` for a
neuron fixed active, ``-1`` for fixed inactive and ``0`` for free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple

import numpy as np

from .errors import InconsistentSplitError, NotAmbiguousError, ShapeError

BLOCKED, AMBIGUOUS, PASSING = 0, 1, 2
_STATE_NAMES = {BLOCKED: "blocked", AMBIGUOUS: "ambiguous", PASSING: "passing"}

ACTIVE, INACTIVE = 1, -1
INFEASIBLE_TOL = 1e-9


class ReluState(NamedTuple):
    state: str
    alpha: float
    beta: float


def relu_quantities(l, u):
    """Classify one neuron and return its gate ratio and triangle intercept."""
    l, u = float(l), float(u)
    if l > u:
        raise ValueError(f"lower bound {l} exceeds upper bound {u}")
    if u <= 0.0:
        return ReluState("blocked", 0.0, 0.0)
    if l >= 0.0:
        return ReluState("passing", 1.0, 0.0)
    width = u - l
    return ReluState("ambiguous", u / width, -l * u / width)


def relu_params(lower, upper):
    """Vectorized :func:`relu_quantities`: ``(state, alpha, beta)`` arrays."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    amb = (lower < 0.0) & (upper > 0.0)
    state = np.where(amb, AMBIGUOUS, np.where(upper > 0.0, PASSING, BLOCKED)).astype(np.int8)
    width = np.where(amb, upper - lower, 1.0)
    alpha = np.where(amb, upper / width, (state == PASSING).astype(np.float64))
    beta = np.where(amb, -lower * upper / width, 0.0)
    return state, alpha, beta


def state_name(code):
    return _STATE_NAMES[int(code)]


@dataclass
class BoundsStack:
    input_lower: np.ndarray
    input_upper: np.ndarray
    lower: List[np.ndarray]
    upper: List[np.ndarray]

    @property
    def num_layers(self):
        return len(self.lower)

    def copy(self):
        return BoundsStack(self.input_lower.copy(), self.input_upper.copy(),
                           [a.copy() for a in self.lower], [a.copy() for a in self.upper])

    @property
    def infeasible(self):
        return any(np.any(lo > up + INFEASIBLE_TOL) for lo, up in zip(self.lower, self.upper))

    def ambiguous(self, k):
        return (self.lower[k] < 0.0) & (self.upper[k] > 0.0)

    def ambiguous_neurons(self):
        """Ambiguous hidden neurons as ``(layer, index)`` pairs in lexicographic order."""
        out = []
        for k in range(self.num_layers - 1):
            out.extend((k, int(j)) for j in np.nonzero(self.ambiguous(k))[0])
        return out

    def num_ambiguous(self):
        return sum(int(self.ambiguous(k).sum()) for k in range(self.num_layers - 1))

    @property
    def output_lower(self):
        return float(self.lower[-1][..., 0]) if self.lower[-1].ndim == 1 else self.lower[-1][..., 0]

    def to_json(self):
        return {"input_lower": self.input_lower.tolist(), "input_upper": self.input_upper.tolist(),
                "lower": [a.tolist() for a in self.lower], "upper": [a.tolist() for a in self.upper]}

    @classmethod
    def from_json(cls, obj):
        arr = lambda v: np.asarray(v, dtype=np.float64)
        return cls(arr(obj["input_lower"]), arr(obj["input_upper"]),
                   [arr(v) for v in obj["lower"]], [arr(v) for v in obj["upper"]])


def batch_stacks(stacks):
    """Stack per-subdomain bounds along a new leading batch axis."""
    return BoundsStack(np.stack([s.input_lower for s in stacks]),
                       np.stack([s.input_upper for s in stacks]),
                       [np.stack([s.lower[k] for s in stacks]) for k in range(stacks[0].num_layers)],
                       [np.stack([s.upper[k] for s in stacks]) for k in range(stacks[0].num_layers)])


# ---------------------------------------------------------------- splits

def empty_splits(net):
    return [np.zeros(n, dtype=np.int8) for n in net.hidden_sizes]


def make_splits(net, items=()):
    """Build split vectors from ``(layer, index, phase)`` triples.

    ``phase`` is ``+1``/``"active"`` or ``-1``/``"inactive"``.  Assigning two
    different phases to one neuron raises :class:`InconsistentSplitError`.
    """
    splits = empty_splits(net)
    for k, j, phase in items:
        code = _phase_code(phase)
        if splits[k][j] not in (0, code):
            raise InconsistentSplitError(f"neuron ({k}, {j}) split both ways")
        splits[k][j] = code
    return splits


def _phase_code(phase):
    if phase in (1, "active", True):
        return ACTIVE
    if phase in (-1, "inactive", False):
        return INACTIVE
    raise InconsistentSplitError(f"unknown split phase {phase!r}")


def check_splits(net, splits):
    if splits is None:
        return empty_splits(net)
    if isinstance(splits, dict):
        return make_splits(net, [(k, j, ph) for (k, j), ph in splits.items()])
    if len(splits) != net.depth - 1:
        raise ShapeError("one split vector per hidden layer expected")
    out = []
    for k, s in enumerate(splits):
        s = np.asarray(s)
        if s.shape != (net.hidden_sizes[k],):
            raise ShapeError(f"split vector {k} has the wrong shape")
        if not np.all(np.isin(s, (-1, 0, 1))):
            raise InconsistentSplitError("split entries must be -1, 0 or +1")
        out.append(s.astype(np.int8))
    return out


def with_split(splits, k, j, phase):
    out = [s.copy() for s in splits]
    code = _phase_code(phase)
    if out[k][j] not in (0, code):
        raise InconsistentSplitError(f"neuron ({k}, {j}) already split the other way")
    out[k][j] = code
    return out


def _clamp(lower, upper, split):
    lower = np.where(split == ACTIVE, np.maximum(lower, 0.0), lower)
    upper = np.where(split == INACTIVE, np.minimum(upper, 0.0), upper)
    return lower, upper


# ---------------------------------------------------------------- bounds

def _domain_bounds(domain_or_stack):
    if isinstance(domain_or_stack, BoundsStack):
        return domain_or_stack.input_lower, domain_or_stack.input_upper
    return np.asarray(domain_or_stack.lower, dtype=np.float64), np.asarray(domain_or_stack.upper, dtype=np.float64)


def _affine_interval(W, b, lo, up):
    mid = (lo + up) / 2.0
    rad = (up - lo) / 2.0
    center = mid @ W.T + b
    radius = rad @ np.abs(W).T
    return center - radius, center + radius


def interval_bounds(net, domain_or_stack, splits=None):
    """Layer-by-layer interval arithmetic with split clamping."""
    splits = check_splits(net, splits)
    x_lo, x_up = _domain_bounds(domain_or_stack)
    if x_lo.shape[-1] != net.input_dim:
        raise ShapeError("domain dimension does not match the network input")
    lowers, uppers = [], []
    lo, up = x_lo, x_up
    for k, layer in enumerate(net.layers):
        W, b = layer.linear()
        pre_lo, pre_up = _affine_interval(W, b, lo, up)
        if k < net.depth - 1:
            pre_lo, pre_up = _clamp(pre_lo, pre_up, splits[k])
            lo, up = np.maximum(pre_lo, 0.0), np.maximum(pre_up, 0.0)
        lowers.append(pre_lo)
        uppers.append(pre_up)
    return BoundsStack(x_lo.copy(), x_up.copy(), lowers, uppers)


def _backward_layer_bounds(net, k, lowers, uppers, x_lo, x_up):
    """Linear bounds on layer ``k`` from the (final) bounds of layers ``< k``."""
    W, b = net.layers[k].linear()
    A = W.copy()
    c_lo = np.broadcast_to(b, A.shape[:-1]).copy()
    c_up = c_lo.copy()
    for j in range(k - 1, -1, -1):
        _, alpha, beta = relu_params(lowers[j], uppers[j])
        c_lo += np.minimum(A, 0.0) @ beta
        c_up += np.maximum(A, 0.0) @ beta
        A = A * alpha
        Wj, bj = net.layers[j].linear()
        c_lo += A @ bj
        c_up += A @ bj
        A = A @ Wj
    mid = (x_lo + x_up) / 2.0
    rad = (x_up - x_lo) / 2.0
    center = A @ mid
    radius = np.abs(A) @ rad
    return c_lo + center - radius, c_up + center + radius


def _finish(lo, up):
    """Mark crossings beyond tolerance as infeasible, snap tiny ones."""
    bad = lo > up + INFEASIBLE_TOL
    snap = (lo > up) & ~bad
    lo = np.where(snap, up, lo)
    return lo, up


def linear_backward_bounds(net, domain, splits=None):
    """Single-slope backward linear bounds, intersected with interval bounds.

    For every layer the pre-activation is bounded by pushing its linear form
    back through the relaxed ReLUs of all earlier layers (slope ``alpha`` on
    both sides, intercept ``beta`` on the upper side) and minimizing over the
    input box.  The result is intersected with one interval step from the
    previous layer's final bounds, so it never loses to interval arithmetic.
    """
    splits = check_splits(net, splits)
    x_lo, x_up = _domain_bounds(domain)
    if x_lo.shape[-1] != net.input_dim:
        raise ShapeError("domain dimension does not match the network input")
    lowers, uppers = [], []
    return _recompute_from(net, 0, lowers, uppers, x_lo, x_up, splits)


def _recompute_from(net, start, lowers, uppers, x_lo, x_up, splits, parent=None):
    for k in range(start, net.depth):
        W, b = net.layers[k].linear()
        if k == 0:
            lo, up = _affine_interval(W, b, x_lo, x_up)
        else:
            lo, up = _backward_layer_bounds(net, k, lowers, uppers, x_lo, x_up)
            i_lo, i_up = _affine_interval(W, b, np.maximum(lowers[k - 1], 0.0),
                                          np.maximum(uppers[k - 1], 0.0))
            lo, up = np.maximum(lo, i_lo), np.minimum(up, i_up)
        if parent is not None:
            lo, up = np.maximum(lo, parent.lower[k]), np.minimum(up, parent.upper[k])
        if k < net.depth - 1:
            lo, up = _clamp(lo, up, splits[k])
        lo, up = _finish(lo, up)
        if k < len(lowers):
            lowers[k], uppers[k] = lo, up
        else:
            lowers.append(lo)
            uppers.append(up)
    return BoundsStack(np.array(x_lo, dtype=np.float64), np.array(x_up, dtype=np.float64),
                       lowers, uppers)


def refresh_after_split(net, parent_stack, new_split, splits=None, full=False):
    """Bounds of the child created by fixing one ambiguous neuron.

    ``new_split`` is ``(layer, index, phase)``.  ``splits`` holds the parent's
    split decisions so later layers keep their clamps.  Layers before the
    split layer keep the parent's bounds unless ``full`` is set; the result
    is intersected with the parent's bounds either way.
    """
    k, j, phase = new_split
    if not (parent_stack.lower[k][j] < 0.0 < parent_stack.upper[k][j]):
        raise NotAmbiguousError(f"neuron ({k}, {j}) is not ambiguous")
    child_splits = with_split(check_splits(net, splits), k, j, phase)
    if full:
        return _recompute_from(net, 0, [], [], parent_stack.input_lower, parent_stack.input_upper,
                               child_splits, parent=parent_stack)
    lowers = [a.copy() for a in parent_stack.lower]
    uppers = [a.copy() for a in parent_stack.upper]
    lowers[k], uppers[k] = _clamp(lowers[k], uppers[k], child_splits[k])
    return _recompute_from(net, k + 1, lowers, uppers, parent_stack.input_lower,
                           parent_stack.input_upper, child_splits, parent=parent_stack)


def backward_coefficients(net, stack):
    """Coefficients of the output's backward linear form on each hidden layer.

    Returns ``(post, pre)``: ``post[k]`` multiplies the post-activation
    ``z_k`` and ``pre[k] = post[k] * alpha_k`` multiplies the pre-activation.
    Arrays follow the stack's batch shape.
    """
    L = net.depth
    batch = stack.lower[0].shape[:-1]
    post = [None] * (L - 1)
    pre = [None] * (L - 1)
    a = np.broadcast_to(net.weights(L - 1)[0], batch + (net.hidden_sizes[-1],)).copy()
    for k in range(L - 2, -1, -1):
        _, alpha, _ = relu_params(stack.lower[k], stack.upper[k])
        post[k] = a
        pre[k] = a * alpha
        if k > 0:
            a = pre[k] @ net.weights(k)
    return post, pre
