"""Lagrangian decomposition of the Planet relaxation.

Each pre-activation ``zhat_k`` is duplicated: copy A lives in the box
``[l_k, u_k]`` together with its relaxed ReLU output ``z_k``, copy B is the
affine image of the previous layer, ``zhat_B,k = W_k z_{k-1} + b_k``.
Dualizing ``zhat_A,k = zhat_B,k`` with multipliers ``rho_k`` gives

    q(rho) = min  zhat_out + sum_k rho_k . (zhat_B,k - zhat_A,k)

which splits into independent per-layer problems with closed-form
minimizers.  Any ``rho`` yields a valid lower bound on the relaxation.

All functions accept stacks and multipliers with leading batch axes, so a
batch of subdomains of one network is processed in a single call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from ._kernels import triangle_argmin
from .errors import BoundBlowupError, ShapeError
from .relax import backward_coefficients

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class InnerSolution:
    z0: np.ndarray
    zhat_a: List[np.ndarray]
    zhat_b: List[np.ndarray]
    z: List[np.ndarray]  # relaxed post-activations paired with zhat_a
    output: np.ndarray  # W_L z_{L-1} + b_L at the minimizer
    q: np.ndarray


def zero_duals(net, batch=()):
    return [np.zeros(tuple(batch) + (n,)) for n in net.hidden_sizes]


def _check_rho(net, stack, rho):
    if len(rho) != net.depth - 1:
        raise ShapeError("one multiplier vector per hidden layer expected")
    for k, r in enumerate(rho):
        if r.shape[-1] != net.hidden_sizes[k]:
            raise ShapeError(f"multiplier {k} has {r.shape[-1]} entries, expected {net.hidden_sizes[k]}")


def inner_minimize(net, stack, rho):
    """Closed-form minimizers of every subproblem of the decomposed dual."""
    rho = [np.asarray(r, dtype=np.float64) for r in rho]
    _check_rho(net, stack, rho)
    L = net.depth
    W0, b0 = net.layers[0].linear()
    coef = rho[0] @ W0
    z0 = np.where(coef >= 0.0, stack.input_lower, stack.input_upper)
    q = np.sum(coef * z0, axis=-1) + rho[0] @ b0
    zhat_a, z_post = [], []
    for k in range(L - 1):
        Wn, bn = net.layers[k + 1].linear()
        if k < L - 2:
            d = rho[k + 1] @ Wn
            q = q + rho[k + 1] @ bn
        else:
            d = Wn[0]
            q = q + bn[0]
        zh, zz, val = triangle_argmin(-rho[k], d, stack.lower[k], stack.upper[k])
        q = q + val.sum(axis=-1)
        zhat_a.append(zh)
        z_post.append(zz)
    zhat_b = [z0 @ W0.T + b0]
    for k in range(1, L - 1):
        Wk, bk = net.layers[k].linear()
        zhat_b.append(z_post[k - 1] @ Wk.T + bk)
    Wl, bl = net.layers[-1].linear()
    output = (z_post[-1] @ Wl.T + bl)[..., 0]
    return InnerSolution(z0, zhat_a, zhat_b, z_post, output, np.asarray(q, dtype=np.float64))


def dual_value(net, stack, rho):
    q = inner_minimize(net, stack, rho).q
    return float(q) if np.ndim(q) == 0 else q


def supergradient(sol: InnerSolution):
    return [b - a for a, b in zip(sol.zhat_a, sol.zhat_b)]


def initial_duals(net, stack):
    """Better of the zero multipliers and the backward-pass coefficients.

    ``q(0)`` equals the interval step from the last hidden layer's bounds and
    the backward coefficients reproduce the single-slope linear bound, so the
    returned point is never worse than either.
    """
    batch = stack.lower[0].shape[:-1]
    _, pre = backward_coefficients(net, stack)
    zero = zero_duals(net, batch)
    q_back = inner_minimize(net, stack, pre).q
    q_zero = inner_minimize(net, stack, zero).q
    pick = np.asarray(q_back >= q_zero)
    return [np.where(pick[..., None], p, z) for p, z in zip(pre, zero)]


class AdamState:
    """First/second moment buffers for a list of arrays."""

    def __init__(self, shapes_like, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.m = [np.zeros_like(a) for a in shapes_like]
        self.v = [np.zeros_like(a) for a in shapes_like]
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def direction(self, grads):
        """Bias-corrected Adam direction for ``grads`` (ascent or descent by caller)."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, g in enumerate(grads):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append((self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def supergradient_ascent(net, stack, rho0, steps=500, lr=1e-4, return_best=False, trace=None):
    """Adam-driven supergradient ascent on ``q``.

    Returns ``(rho, best_q)`` where ``best_q`` is the largest dual value seen
    (including the starting point).  ``rho`` is the final iterate, or the
    best one when ``return_best`` is set.  If ``trace`` is a list, the value
    at every iterate is appended to it.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    rho = [np.array(r, dtype=np.float64) for r in rho0]
    sol = inner_minimize(net, stack, rho)
    best_q = sol.q.copy()
    best_rho = [r.copy() for r in rho]
    adam = AdamState(rho)
    for _ in range(steps):
        if not np.all(np.isfinite(sol.q)):
            raise BoundBlowupError("dual value is not finite")
        step = adam.direction(supergradient(sol))
        rho = [r + lr * s for r, s in zip(rho, step)]
        sol = inner_minimize(net, stack, rho)
        if trace is not None:
            trace.append(sol.q.copy())
        better = sol.q > best_q
        if np.any(better):
            best_q = np.where(better, sol.q, best_q)
            best_rho = [np.where(better[..., None], r, b) for r, b in zip(rho, best_rho)]
    if not np.all(np.isfinite(best_q)):
        raise BoundBlowupError("dual value is not finite")
    best = float(best_q) if best_q.ndim == 0 else best_q
    return (best_rho if return_best else rho), best


def supergradient_steps(net, stack, rho0, step_sizes):
    """Plain ascent ``rho <- rho + eta_t * (zhat_B - zhat_A)``; returns all iterates and values."""
    rho = [np.array(r, dtype=np.float64) for r in rho0]
    sol = inner_minimize(net, stack, rho)
    rhos, qs = [rho], [sol.q]
    for eta in step_sizes:
        rho = [r + eta * g for r, g in zip(rho, supergradient(sol))]
        sol = inner_minimize(net, stack, rho)
        rhos.append(rho)
        qs.append(sol.q)
    return rhos, qs
