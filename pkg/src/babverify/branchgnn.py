"""Branching GNN: picks the ambiguous ReLU to split next.

The graph mirrors the verified network: one node per input coordinate, one
per hidden neuron (pre- and post-activation merged) and one output node.
Embeddings start at zero and go through ``T2`` rounds of a forward sweep
(input -> output) and a backward sweep (output -> input) before a small MLP
scores every ambiguous neuron.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import dual
from .errors import EmptyDatasetError, ShapeError
from .gnn import Adam, Graph, Params, add_grads, mlp_forward, mlp_params
from .relax import AMBIGUOUS, BoundsStack, relu_params

logger = logging.getLogger(__name__)

VARIANT = "branch"
DEFAULT_P = 64
INPUT_FEATS = 3  # l0, u0, primal x0
ACT_FEATS = 7  # l, u, beta, bias, primal zhat, primal z, dual rho
OUT_FEATS = 4  # l, u, bias, primal output
FAILSAFE_THRESHOLD = 0.2
NUM_CLASSES = 10

# name -> (input width as a multiple of p or a constant, number of layers)
_MLPS = {
    "f_inp": (INPUT_FEATS, 2), "f_lf": (ACT_FEATS, 2), "f_nb": ("2p", 2), "f_com": ("2p", 2),
    "f_out_lf": (OUT_FEATS, 1), "f_out_com": ("2p", 2),
    "b_lf1": (ACT_FEATS, 2), "b_lf2": ("2p", 2), "b_nb": ("2p", 2), "b_com": ("2p", 2),
    "b_inp_lf": (2, 2), "b_inp_com": ("2p", 2),
}


def branch_params(p=DEFAULT_P, t2=2, seed=0):
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, (width, depth) in _MLPS.items():
        d_in = 2 * p if width == "2p" else width
        tensors.update(mlp_params(rng, name, [d_in] + [p] * depth))
    tensors.update(mlp_params(rng, "score", [p, p, 1]))
    meta = {"p": p, "T2": t2, "input_features": INPUT_FEATS, "act_features": ACT_FEATS,
            "out_features": OUT_FEATS}
    return Params(VARIANT, meta, tensors)


@dataclass
class BranchFeatures:
    inputs: np.ndarray  # (n0, 3)
    acts: List[np.ndarray]  # per hidden layer (n_k, 7)
    output: np.ndarray  # (4,)
    alpha: List[np.ndarray]
    ambiguous: List[np.ndarray]
    rho: List[np.ndarray]
    domain: np.ndarray  # (n0, 2)


@dataclass
class BranchDecision:
    layer: int
    index: int
    score: float

    @property
    def neuron(self):
        return (self.layer, self.index)


def build_branch_features(net, stack: BoundsStack, sol: dual.InnerSolution, rho, use_primal_dual=True):
    """Node features for one subdomain (no batch axis)."""
    if stack.lower[0].ndim != 1:
        raise ShapeError("branch features are built per subdomain")
    keep = 1.0 if use_primal_dual else 0.0
    x0 = np.asarray(sol.z0, dtype=np.float64)
    inputs = np.stack([stack.input_lower, stack.input_upper, keep * x0], axis=-1)
    acts, alphas, ambs = [], [], []
    for k in range(net.depth - 1):
        lo, up = stack.lower[k], stack.upper[k]
        state, alpha, beta = relu_params(lo, up)
        acts.append(np.stack([lo, up, beta, net.bias(k), keep * sol.zhat_a[k], keep * sol.z[k],
                              keep * np.asarray(rho[k])], axis=-1))
        alphas.append(alpha)
        ambs.append(state == AMBIGUOUS)
    output = np.array([stack.lower[-1][0], stack.upper[-1][0], net.bias(net.depth - 1)[0],
                       keep * float(sol.output)])
    feats = BranchFeatures(inputs, acts, output, alphas, ambs, [np.asarray(r) for r in rho],
                           np.stack([stack.input_lower, stack.input_upper], axis=-1))
    for arr in [inputs, output] + acts:
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite branching feature")
    return feats


def _gate(g, alpha, E):
    a = alpha[:, None]
    a2 = np.where((alpha > 0.0) & (alpha < 1.0), 1.0 - alpha, alpha)[:, None]
    return g.concat([g.mul(E, a), g.mul(E, a2)])


def _fan_out(layer):
    """Number of downstream connections per input unit of ``layer``."""
    return np.maximum(layer.connectivity.sum(axis=0), 1).astype(np.float64)


@dataclass
class BranchGraphState:
    mu_in: object
    mu_act: list
    mu_out: object


def init_state(net, p):
    return BranchGraphState(np.zeros((net.input_dim, p)), [np.zeros((n, p)) for n in net.hidden_sizes],
                            np.zeros((1, p)))


def branch_forward_pass(g: Graph, state: BranchGraphState, feats: BranchFeatures, net, params: Params):
    mu_in = state.mu_in
    if isinstance(mu_in, np.ndarray) and not np.any(mu_in):
        mu_in = mlp_forward(g, "f_inp", feats.inputs, 2)
    prev = mu_in
    acts = []
    for k in range(net.depth - 1):
        mask = feats.ambiguous[k].astype(np.float64)[:, None]
        R = g.mul(mlp_forward(g, "f_lf", feats.acts[k], 2), mask)
        E = g.nodemix(net.weights(k), prev)
        N = mlp_forward(g, "f_nb", _gate(g, feats.alpha[k], E), 2)
        prev = mlp_forward(g, "f_com", g.concat([R, N]), 2)
        acts.append(prev)
    R = g.relu(mlp_forward(g, "f_out_lf", feats.output[None, :], 1))
    E = g.nodemix(net.weights(net.depth - 1), prev)
    mu_out = mlp_forward(g, "f_out_com", g.concat([R, E]), 2)
    return BranchGraphState(mu_in, acts, mu_out)


def branch_backward_pass(g: Graph, state: BranchGraphState, feats: BranchFeatures, net, params: Params):
    L1 = net.depth - 1
    acts = list(state.mu_act)
    nxt = state.mu_out
    for k in range(L1 - 1, -1, -1):
        layer = net.layers[k + 1]
        mask = feats.ambiguous[k].astype(np.float64)[:, None]
        Rb = g.mul(mlp_forward(g, "b_lf1", feats.acts[k], 2), mask)
        Rb2 = g.mul(mlp_forward(g, "b_lf2", g.concat([g.mul(Rb, feats.rho[k][:, None]), Rb]), 2), mask)
        E = g.nodemix(layer.linear()[0].T, nxt)
        if layer.kind == "conv2d":
            E = g.mul(E, 1.0 / _fan_out(layer)[:, None])
        N = mlp_forward(g, "b_nb", _gate(g, feats.alpha[k], E), 2)
        acts[k] = mlp_forward(g, "b_com", g.concat([Rb2, N]), 2)
        nxt = acts[k]
    layer = net.layers[0]
    E = g.nodemix(layer.linear()[0].T, nxt)
    if layer.kind == "conv2d":
        E = g.mul(E, 1.0 / _fan_out(layer)[:, None])
    R = mlp_forward(g, "b_inp_lf", feats.domain, 2)
    mu_in = mlp_forward(g, "b_inp_com", g.concat([R, E]), 2)
    return BranchGraphState(mu_in, acts, state.mu_out)


def candidate_list(feats: BranchFeatures):
    return [(k, int(j)) for k, amb in enumerate(feats.ambiguous) for j in np.nonzero(amb)[0]]


def branch_scores(g: Graph, feats: BranchFeatures, net, params: Params):
    """Scores of all ambiguous neurons (lexicographic order) after ``T2`` rounds."""
    state = init_state(net, params.meta["p"])
    for _ in range(params.meta["T2"]):
        state = branch_forward_pass(g, state, feats, net, params)
        state = branch_backward_pass(g, state, feats, net, params)
    picked = []
    for k, amb in enumerate(feats.ambiguous):
        idx = np.nonzero(amb)[0]
        if idx.size:
            picked.append(g.gather(state.mu_act[k], idx, axis=0))
    if not picked:
        return None
    emb = g.concat(picked, axis=0) if len(picked) > 1 else picked[0]
    return mlp_forward(g, "score", emb, 2)


def score_and_decide(net, stack, sol, rho, params: Params, use_primal_dual=True):
    feats = build_branch_features(net, stack, sol, rho, use_primal_dual)
    cands = candidate_list(feats)
    if not cands:
        raise ValueError("no ambiguous neuron to branch on")
    scores = branch_scores(Graph(params.tensors), feats, net, params)[:, 0]
    best = int(np.argmax(scores))  # first maximum: lexicographic tie-break
    return BranchDecision(cands[best][0], cands[best][1], float(scores[best]))


# ---------------------------------------------------------------- labels and losses

def improvement_measure(parent_lb, child_lb1, child_lb2):
    if not parent_lb < 0.0:
        raise ValueError("improvement is defined only for a negative parent bound")
    return (min(child_lb1, 0.0) + min(child_lb2, 0.0) - 2.0 * parent_lb) / (-2.0 * parent_lb)


def rank_labels(m, M=NUM_CLASSES):
    """Normalize by the sample maximum, then bin into ``M`` ascending classes."""
    m = np.clip(np.asarray(m, dtype=np.float64), 0.0, None)
    top = m.max() if m.size else 0.0
    if top <= 0.0:
        return np.zeros(m.shape, dtype=np.int64)
    return np.minimum(np.floor(m / top * M), M - 1).astype(np.int64)


def _pairs(labels):
    labels = np.asarray(labels)
    hi, lo = np.nonzero(labels[:, None] > labels[None, :])
    return hi, lo


def hinge_rank_loss(scores, labels, M=NUM_CLASSES):
    """Mean of ``(1 - (s_j - s_i))_+`` over ordered pairs with ``Y_j > Y_i``; 0 if none."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    hi, lo = _pairs(labels)
    if hi.size == 0:
        return 0.0
    return float(np.maximum(1.0 - (s[hi] - s[lo]), 0.0).mean())


def _hinge_on_graph(g, scores, labels):
    hi, lo = _pairs(labels)
    if hi.size == 0:
        return None
    diff = g.sub(g.gather(scores, hi, axis=0), g.gather(scores, lo, axis=0))
    return g.scale(g.sum(g.relu(g.add(g.scale(diff, -1.0), 1.0))), 1.0 / hi.size)


def failsafe_branch(m_gnn, gnn_decision, backup, threshold=FAILSAFE_THRESHOLD):
    """Keep the GNN decision unless it scores below ``threshold`` and the backup does better.

    ``backup`` is a callable returning ``(decision, m)``; it is only invoked
    when needed.  Returns ``(decision, m, used_backup)``.
    """
    if m_gnn >= threshold:
        return gnn_decision, m_gnn, False
    dec, m_b = backup()
    if m_b > m_gnn:
        return dec, m_b, True
    return gnn_decision, m_gnn, False


# ---------------------------------------------------------------- training

@dataclass
class BranchSample:
    network_path: str
    stack: BoundsStack
    splits: list
    rho: list
    candidates: list  # [(layer, index)] in lexicographic order
    m: np.ndarray

    def to_json(self):
        return {"network": self.network_path, "stack": self.stack.to_json(),
                "splits": [s.tolist() for s in self.splits], "rho": [r.tolist() for r in self.rho],
                "candidates": [list(c) for c in self.candidates], "m": np.asarray(self.m).tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["network"], BoundsStack.from_json(obj["stack"]),
                   [np.asarray(s, dtype=np.int8) for s in obj["splits"]],
                   [np.asarray(r, dtype=np.float64) for r in obj["rho"]],
                   [tuple(c) for c in obj["candidates"]], np.asarray(obj["m"], dtype=np.float64))


@dataclass
class BranchTrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 2
    max_epochs: int = 200
    patience: int = 10
    lr_decay: float = 5.0
    stop_after: int = 20
    num_classes: int = NUM_CLASSES
    val_fraction: float = 0.2
    seed: int = 0
    use_primal_dual: bool = True


@dataclass
class _Prepared:
    net: object
    feats: BranchFeatures
    labels: np.ndarray


def prepare_samples(samples, networks, config: BranchTrainConfig):
    out = []
    for s in samples:
        net = networks[s.network_path]
        sol = dual.inner_minimize(net, s.stack, s.rho)
        feats = build_branch_features(net, s.stack, sol, s.rho, config.use_primal_dual)
        cands = candidate_list(feats)
        # sample m values are indexed by their own candidate list; align to ours
        lookup = {tuple(c): v for c, v in zip(s.candidates, s.m)}
        m = np.array([lookup.get(c, 0.0) for c in cands])
        out.append(_Prepared(net, feats, rank_labels(m, config.num_classes)))
    return out


def sample_loss_grad(params: Params, prep: _Prepared, record=True):
    g = Graph(params.tensors, record=record)
    scores = branch_scores(g, prep.feats, prep.net, params)
    if scores is None:
        return 0.0, None
    loss = _hinge_on_graph(g, scores, prep.labels)
    if loss is None:
        return 0.0, None
    if not record:
        return float(loss), None
    return float(loss.value), g.backward(loss)


def dataset_loss(params, prepared):
    if not prepared:
        return 0.0
    return float(np.mean([sample_loss_grad(params, p, record=False)[0] for p in prepared]))


def train_branch_gnn(samples, params0: Params, networks, config: BranchTrainConfig = None, log=None):
    """Adam on the mean hinge-rank loss plus an L2 penalty; returns best-validation params."""
    config = config or BranchTrainConfig()
    if not samples:
        raise EmptyDatasetError("empty dataset")
    rng = np.random.default_rng(config.seed)
    prepared = prepare_samples(samples, networks, config)
    order = rng.permutation(len(prepared))
    n_val = int(round(config.val_fraction * len(prepared))) if len(prepared) > 2 else 0
    val = [prepared[i] for i in sorted(order[:n_val])]
    train = [prepared[i] for i in sorted(order[n_val:])]
    params = params0.copy()
    opt = Adam(params, config.lr)
    best_params = params.copy()
    best_val = dataset_loss(params, val if val else train)
    history = [{"epoch": -1, "train_loss": dataset_loss(params, train), "val_loss": best_val, "lr": opt.lr}]
    since_best, stagnant = 0, 0
    for epoch in range(config.max_epochs):
        perm = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(perm), config.batch_size):
            batch = [train[i] for i in perm[start:start + config.batch_size]]
            grads = {k: config.weight_decay * v for k, v in params.items()}
            for prep in batch:
                loss, gr = sample_loss_grad(params, prep)
                total += loss
                if gr is not None:
                    grads = add_grads(grads, gr, 1.0 / len(batch))
            opt.step(params, grads)
        train_loss = total / max(len(train), 1)
        val_loss = dataset_loss(params, val) if val else train_loss
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.lr})
        if log is not None:
            log(history[-1])
        logger.info("branch epoch %d train %.6g val %.6g lr %.3g", epoch, train_loss, val_loss, opt.lr)
        if val_loss < best_val - 1e-12:
            best_val, best_params = val_loss, params.copy()
            since_best, stagnant = 0, 0
        else:
            since_best += 1
            stagnant += 1
            if stagnant >= config.patience:
                opt.lr /= config.lr_decay
                stagnant = 0
            if since_best >= config.stop_after:
                break
    return best_params, history


def decision_accuracy(params, samples, networks, use_primal_dual=True, threshold=0.9):
    """Fraction of samples whose chosen neuron reaches ``threshold`` of the best m."""
    hits = 0
    for s in samples:
        net = networks[s.network_path]
        sol = dual.inner_minimize(net, s.stack, s.rho)
        dec = score_and_decide(net, s.stack, sol, s.rho, params, use_primal_dual)
        lookup = {tuple(c): v for c, v in zip(s.candidates, s.m)}
        top = max(s.m) if len(s.m) else 0.0
        if top <= 0.0 or lookup.get(dec.neuron, 0.0) >= threshold * top:
            hits += 1
    return hits / max(len(samples), 1)
