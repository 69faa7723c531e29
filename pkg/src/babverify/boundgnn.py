"""Bounding GNN: learned dual updates on the Lagrangian decomposition.

One graph node per dual variable (hidden pre-activation).  Each iteration
reads the current multipliers and inner solution, embeds them, runs
forward/backward message passes shaped like the network, and emits an
ascent direction ``rho_bar``; the multipliers move by ``eta_t * rho_bar``.
Every bound reported is ``q(rho)`` at a concrete ``rho`` and so is valid no
matter what the parameters are.
"""

from __future__ import annotations

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import dual
from .errors import BoundBlowupError, EmptyDatasetError, ShapeError
from .gnn import Adam, Graph, Params, mlp_forward, mlp_params, uniform_init
from .relax import BoundsStack, batch_stacks

logger = logging.getLogger(__name__)

VARIANT = "bound"
FEATURE_DIM = 4
DEFAULT_P = 32
DEFAULT_ITERS = 100
DEFAULT_ETA0 = 1e-3
DEFAULT_GAMMA = 0.99
FAILSAFE_THRESHOLD = 0.05
ACCEPT, SUPERGRADIENT = "accept", "supergradient"


# ---------------------------------------------------------------- params

def bound_params(p=DEFAULT_P, t1=1, t2=1, seed=0):
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    tensors.update(mlp_params(rng, "init", [FEATURE_DIM] + [p] * (t1 + 1)))
    for name in ("f1", "f2", "f3", "b1", "b2", "b3"):
        tensors[name] = uniform_init(rng, p, p)
    tensors["score"] = rng.uniform(-1.0 / np.sqrt(p), 1.0 / np.sqrt(p), size=p)
    return Params(VARIANT, {"p": p, "T1": t1, "T2": t2, "d": FEATURE_DIM}, tensors)


def prop1_parameters(p=DEFAULT_P, d=FEATURE_DIM):
    """Parameters whose output direction is exactly ``zhat_B - zhat_A``.

    The init MLP splits the supergradient feature into its positive and
    negative parts, identity passes keep them, and the score recombines them.
    """
    if p < 2:
        raise ValueError("embedding size must be at least 2")
    if d != FEATURE_DIM:
        raise ShapeError(f"bounding features have {FEATURE_DIM} entries")
    params = bound_params(p, 1, 1)
    for name in params.keys():
        params[name] = np.zeros_like(params[name])
    w0 = np.zeros((p, d))
    w0[0, 3] = 1.0
    w0[1, 3] = -1.0
    params["init.w0"] = w0
    params["init.w1"] = np.eye(p)
    params["f1"] = np.eye(p)
    params["b1"] = np.eye(p)
    score = np.zeros(p)
    score[0], score[1] = 1.0, -1.0
    params["score"] = score
    return params


# ---------------------------------------------------------------- features

def build_bound_features(rho, sol: dual.InnerSolution):
    """Per dual node ``(rho, zhat_A, zhat_B, zhat_B - zhat_A)``."""
    out = []
    for r, a, b in zip(rho, sol.zhat_a, sol.zhat_b):
        if np.shape(r) != np.shape(a):
            raise ShapeError("multiplier and inner solution shapes differ")
        out.append(np.stack([r, a, b, b - a], axis=-1))
    return out


@dataclass
class NeighborCounts:
    """Row-normalized neighbor averaging matrices for every hidden layer."""

    prev: List[Optional[np.ndarray]]  # prev[k]: (n_k, n_{k-1}), None for k = 0
    next: List[Optional[np.ndarray]]  # next[k]: (n_k, n_{k+1}), None for the last hidden layer
    Q: List[Optional[np.ndarray]]
    Q_next: List[Optional[np.ndarray]]


def neighbor_counts(net):
    L = net.depth
    prev, nxt, Q, Qn = [None] * (L - 1), [None] * (L - 1), [None] * (L - 1), [None] * (L - 1)
    for k in range(1, L - 1):
        C = net.layers[k].connectivity.astype(np.float64)
        Q[k] = C.sum(axis=1)
        prev[k] = C / Q[k][:, None]
    for k in range(L - 2):
        C = net.layers[k + 1].connectivity.T.astype(np.float64)
        Qn[k] = C.sum(axis=1)
        nxt[k] = C / np.maximum(Qn[k], 1.0)[:, None]
    return NeighborCounts(prev, nxt, Q, Qn)


# ---------------------------------------------------------------- passes

def bound_init_embed(g: Graph, feats, params: Params):
    depth = params.meta["T1"] + 1
    return [mlp_forward(g, "init", f, depth) for f in feats]


def bound_forward_backward(g: Graph, mu, net, params: Params, counts: NeighborCounts):
    """``T2`` rounds of a forward sweep then a backward sweep over the layers.

    Sweeps are sequential: each layer reads the already updated embeddings
    of the layer before it (forward) or after it (backward).  The first
    hidden layer has no dual predecessor and the last hidden layer no dual
    successor, so those updates keep only the self term.
    """
    L1 = net.depth - 1
    mu = list(mu)
    for _ in range(params.meta["T2"]):
        for k in range(L1):
            h = g.linear(mu[k], g.param("f1"))
            if k > 0:
                W, b = net.layers[k].linear()
                lin = g.add(g.nodemix(W, mu[k - 1]), b[:, None])
                h = g.add(h, g.linear(lin, g.param("f2")))
                h = g.add(h, g.linear(g.nodemix(counts.prev[k], mu[k - 1]), g.param("f3")))
            mu[k] = g.relu(h)
        for k in range(L1 - 1, -1, -1):
            h = g.linear(mu[k], g.param("b1"))
            if k < L1 - 1:
                W, b = net.layers[k + 1].linear()
                back = g.nodemix(W.T, g.add(mu[k + 1], -b[:, None]))
                h = g.add(h, g.linear(back, g.param("b2")))
                h = g.add(h, g.linear(g.nodemix(counts.next[k], mu[k + 1]), g.param("b3")))
            mu[k] = g.relu(h)
    return mu


def bound_output_duals(g: Graph, mu, params: Params):
    return [g.dot(m, g.param("score")) for m in mu]


def bound_directions(g: Graph, net, feats, params: Params, counts=None):
    counts = neighbor_counts(net) if counts is None else counts
    mu = bound_init_embed(g, feats, params)
    mu = bound_forward_backward(g, mu, net, params, counts)
    return bound_output_duals(g, mu, params)


# ---------------------------------------------------------------- updates

def step_size(t, eta0=DEFAULT_ETA0, schedule="inv_sqrt"):
    if t < 1:
        raise ValueError("iteration counter starts at 1")
    if schedule == "inv_sqrt":
        return eta0 / np.sqrt(t)
    if schedule == "sqrt":
        return eta0 * np.sqrt(t)
    if schedule == "constant":
        return eta0
    raise ValueError(f"unknown step-size schedule {schedule!r}")


def dual_update(rho, direction, t, eta0=DEFAULT_ETA0, schedule="inv_sqrt"):
    eta = step_size(t, eta0, schedule)
    return [r + eta * d for r, d in zip(rho, direction)]


def gnn_bound_solve(net, stack, rho0, params: Params, iters=DEFAULT_ITERS, eta0=DEFAULT_ETA0,
                    schedule="inv_sqrt", trace=None):
    """Run the learned dual iteration; returns ``(final rho, best q)``.

    ``best q`` includes the value at ``rho0``.  ``trace`` (a list) receives
    ``(rho, q)`` after every update.  Raises :class:`BoundBlowupError` when
    a dual value stops being finite.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    counts = neighbor_counts(net)
    g = Graph(params.tensors)
    rho = [np.array(r, dtype=np.float64) for r in rho0]
    sol = dual.inner_minimize(net, stack, rho)
    best = sol.q.copy()
    for t in range(1, iters + 1):
        feats = build_bound_features(rho, sol)
        direction = bound_directions(g, net, feats, params, counts)
        rho = dual_update(rho, direction, t, eta0, schedule)
        sol = dual.inner_minimize(net, stack, rho)
        if not np.all(np.isfinite(sol.q)):
            raise BoundBlowupError("dual value is not finite")
        if trace is not None:
            trace.append(([r.copy() for r in rho], sol.q.copy()))
        best = np.maximum(best, sol.q)
    return rho, (float(best) if best.ndim == 0 else best)


def failsafe_bound(child_q, parent_q, threshold=FAILSAFE_THRESHOLD):
    if not (np.isfinite(child_q) and np.isfinite(parent_q)):
        return SUPERGRADIENT
    return ACCEPT if child_q >= parent_q + threshold else SUPERGRADIENT


# ---------------------------------------------------------------- loss

def default_kappa(q_supg):
    return np.maximum(0.01 * np.abs(q_supg), 1e-3)


def bound_loss(qs, q_supg, gamma=DEFAULT_GAMMA, kappa=None):
    """Truncated discounted loss of one trajectory ``q(rho^1) .. q(rho^K)``."""
    qs = np.asarray(qs, dtype=np.float64)
    kappa = default_kappa(q_supg) if kappa is None else kappa
    if not qs[-1] < q_supg + kappa:
        return 0.0
    weights = gamma ** np.arange(1, qs.shape[0] + 1)
    return float(-(weights * qs).sum())


@dataclass
class Rollout:
    feats: list  # feats[t][k]: features read at step t+1
    rhos: list  # rhos[t]: rho^t, t = 0..K
    qs: np.ndarray  # (K, B): q(rho^1) .. q(rho^K)
    grads: list  # grads[t][k]: supergradient at rho^{t+1}
    etas: np.ndarray


def rollout(net, stack, rho0, params: Params, K, eta0=DEFAULT_ETA0, schedule="inv_sqrt", counts=None):
    counts = neighbor_counts(net) if counts is None else counts
    g = Graph(params.tensors)
    rho = [np.array(r, dtype=np.float64) for r in rho0]
    sol = dual.inner_minimize(net, stack, rho)
    feats, rhos, qs, grads, etas = [], [rho], [], [], []
    for t in range(1, K + 1):
        f = build_bound_features(rho, sol)
        d = bound_directions(g, net, f, params, counts)
        eta = step_size(t, eta0, schedule)
        rho = [r + eta * di for r, di in zip(rho, d)]
        sol = dual.inner_minimize(net, stack, rho)
        feats.append(f)
        rhos.append(rho)
        qs.append(sol.q)
        grads.append(dual.supergradient(sol))
        etas.append(eta)
    return Rollout(feats, rhos, np.array(qs), grads, np.array(etas))


def _stack_steps(per_step):
    """``[step][layer] (B, n, ...)`` -> ``[layer] (K*B, n, ...)``."""
    return [np.concatenate([s[k] for s in per_step], axis=0) for k in range(len(per_step[0]))]


def loss_and_grad(params: Params, net, stack, rho0, q_supg, K=DEFAULT_ITERS, gamma=DEFAULT_GAMMA,
                  kappa=None, eta0=DEFAULT_ETA0, schedule="inv_sqrt", counts=None):
    """Summed loss over a batch of subdomains of one network and its gradient.

    Inner solutions, and hence features, are constants at every step; the
    path through ``q`` uses the supergradient, which is the exact derivative
    of ``q`` wherever the inner minimizer is unique.
    """
    counts = neighbor_counts(net) if counts is None else counts
    q_supg = np.asarray(q_supg, dtype=np.float64)
    kappa = default_kappa(q_supg) if kappa is None else np.asarray(kappa, dtype=np.float64)
    if stack.lower[0].ndim != 2:
        raise ShapeError("loss_and_grad expects a batched stack (see relax.batch_stacks)")
    ro = rollout(net, stack, rho0, params, K, eta0, schedule, counts)
    on = (ro.qs[-1] < q_supg + kappa).astype(np.float64)
    weights = gamma ** np.arange(1, K + 1)
    loss = float(-(on * (weights[:, None] * ro.qs).sum(axis=0)).sum())
    # adjoint of each step's direction: eta_s * sum_{t >= s} dL/drho^t
    seeds, acc = [None] * K, None
    for t in range(K - 1, -1, -1):
        term = [-weights[t] * on[:, None] * gk for gk in ro.grads[t]]
        acc = term if acc is None else [a + b for a, b in zip(acc, term)]
        seeds[t] = [ro.etas[t] * a for a in acc]
    g = Graph(params.tensors, record=True)
    dirs = bound_directions(g, net, _stack_steps(ro.feats), params, counts)
    seed = _stack_steps(seeds)
    total = None
    for d, s in zip(dirs, seed):
        term = g.sum(g.mul(d, s))
        total = term if total is None else g.add(total, term)
    grads = g.backward(total)
    return loss, grads, ro


def surrogate_loss(params: Params, net, ro: Rollout, q_supg, gamma=DEFAULT_GAMMA, kappa=None, counts=None):
    """Loss as a function of the parameters with the rollout's features frozen.

    ``q(rho^t)`` is replaced by its linearization around the recorded
    iterate; the gradient of this function is what :func:`loss_and_grad`
    returns, so it serves as the finite-difference reference.
    """
    counts = neighbor_counts(net) if counts is None else counts
    q_supg = np.asarray(q_supg, dtype=np.float64)
    kappa = default_kappa(q_supg) if kappa is None else kappa
    K = len(ro.feats)
    on = (ro.qs[-1] < q_supg + kappa).astype(np.float64)
    weights = gamma ** np.arange(1, K + 1)
    g = Graph(params.tensors)
    rho = [r.copy() for r in ro.rhos[0]]
    total = 0.0
    for t in range(K):
        d = bound_directions(g, net, ro.feats[t], params, counts)
        rho = [r + ro.etas[t] * di for r, di in zip(rho, d)]
        q = ro.qs[t] + sum(((r - rv) * gk).sum(axis=-1) for r, rv, gk in zip(rho, ro.rhos[t + 1], ro.grads[t]))
        total += float(-(on * weights[t] * q).sum())
    return total


# ---------------------------------------------------------------- training

@dataclass
class BoundSample:
    network_path: str
    stack: BoundsStack
    splits: list
    parent_rho: list
    q_supg: float

    def to_json(self):
        return {"network": self.network_path, "stack": self.stack.to_json(),
                "splits": [s.tolist() for s in self.splits],
                "parent_rho": [r.tolist() for r in self.parent_rho], "q_supg": self.q_supg}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["network"], BoundsStack.from_json(obj["stack"]),
                   [np.asarray(s, dtype=np.int8) for s in obj["splits"]],
                   [np.asarray(r, dtype=np.float64) for r in obj["parent_rho"]], float(obj["q_supg"]))


@dataclass
class BoundTrainConfig:
    lr: float = 1e-2
    epochs: int = 50
    K: int = DEFAULT_ITERS
    gamma: float = DEFAULT_GAMMA
    eta0: float = DEFAULT_ETA0
    schedule: str = "inv_sqrt"
    batch_size: int = 64
    patience: int = 2
    lr_decay: float = 10.0
    val_fraction: float = 0.1
    seed: int = 0
    time_budget: Optional[float] = None


def _groups(samples, batch_size):
    by_net = OrderedDict()
    for i, s in enumerate(samples):
        by_net.setdefault(s.network_path, []).append(i)
    out = []
    for path, idx in by_net.items():
        for start in range(0, len(idx), batch_size):
            out.append((path, idx[start:start + batch_size]))
    return out


def _batch(samples, idx):
    stack = batch_stacks([samples[i].stack for i in idx])
    rho0 = [np.stack([samples[i].parent_rho[k] for i in idx]) for k in range(len(samples[idx[0]].parent_rho))]
    q = np.array([samples[i].q_supg for i in idx])
    return stack, rho0, q


def evaluate_bound_gnn(params, samples, networks, iters=DEFAULT_ITERS, eta0=DEFAULT_ETA0,
                       schedule="inv_sqrt", batch_size=256):
    """Best q of the learned iteration for every sample, in input order."""
    out = np.empty(len(samples))
    for path, idx in _groups(samples, batch_size):
        stack, rho0, _ = _batch(samples, idx)
        _, best = gnn_bound_solve(networks[path], stack, rho0, params, iters, eta0, schedule)
        out[idx] = best
    return out


def train_bound_gnn(samples, params0: Params, networks, config: BoundTrainConfig = None, log=None):
    """Adam on the summed truncated loss; returns the best-validation parameters.

    ``networks`` maps each sample's network path to a loaded network.
    """
    config = config or BoundTrainConfig()
    if not samples:
        raise EmptyDatasetError("empty dataset")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(samples))
    n_val = int(round(config.val_fraction * len(samples))) if len(samples) > 1 else 0
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    params = params0.copy()
    opt = Adam(params, config.lr)
    counts = {path: neighbor_counts(net) for path, net in networks.items()}

    def total_loss(data):
        loss = 0.0
        for path, idx in _groups(data, 256):
            stack, rho0, q = _batch(data, idx)
            ro = rollout(networks[path], stack, rho0, params, config.K, config.eta0, config.schedule,
                         counts[path])
            kappa = default_kappa(q)
            on = ro.qs[-1] < q + kappa
            w = config.gamma ** np.arange(1, config.K + 1)
            loss += float(-(on * (w[:, None] * ro.qs).sum(axis=0)).sum())
        return loss

    best_params, best_val = params.copy(), total_loss(val) if val else None
    stagnant, prev_train = 0, np.inf
    history = []
    start = time.monotonic()
    for epoch in range(config.epochs):
        batches = _groups([train[i] for i in range(len(train))], config.batch_size)
        perm = rng.permutation(len(batches))
        epoch_loss = 0.0
        for b in perm:
            path, idx = batches[b]
            stack, rho0, q = _batch(train, idx)
            loss, grads, _ = loss_and_grad(params, networks[path], stack, rho0, q, config.K,
                                           config.gamma, None, config.eta0, config.schedule, counts[path])
            epoch_loss += loss
            opt.step(params, grads)
        val_loss = total_loss(val) if val else epoch_loss
        history.append({"epoch": epoch, "train_loss": epoch_loss, "val_loss": val_loss, "lr": opt.lr})
        if log is not None:
            log(history[-1])
        logger.info("bound epoch %d train %.6g val %.6g lr %.3g", epoch, epoch_loss, val_loss, opt.lr)
        if best_val is None or val_loss < best_val:
            best_val, best_params = val_loss, params.copy()
        if epoch_loss < prev_train - 1e-12:
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= config.patience:
                opt.lr /= config.lr_decay
                stagnant = 0
        prev_train = min(prev_train, epoch_loss)
        if config.time_budget is not None and time.monotonic() - start > config.time_budget:
            break
    best_params.meta = dict(best_params.meta, trained_epochs=len(history))
    return best_params, history
