"""Best-first branch-and-bound over ReLU splits.

The queue holds unpruned subdomains ordered by lower bound.  Each iteration
removes a batch of the lowest ones, splits each on one ambiguous neuron,
bounds all children together, looks for a counterexample at every child's
bound minimizer and prunes children whose lower bound is non-negative.
"""

from __future__ import annotations

import heapq
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import boundgnn, branchgnn, dual, oracle
from .errors import BoundBlowupError
from .model import InputDomain, evaluate
from .relax import (BoundsStack, batch_stacks, backward_coefficients, check_splits, interval_bounds,
                    linear_backward_bounds, refresh_after_split, relu_params, with_split)

logger = logging.getLogger(__name__)

STRATEGIES = ("random", "babsr_sub", "strong", "gnn")
BACKENDS = ("interval", "linear", "lp", "supergradient", "gnn")
MAIN, SUPERGRADIENT = "main", "supergradient"
VERIFIED, FALSIFIED, TIMEOUT = "verified", "falsified", "timeout"


@dataclass
class BabConfig:
    strategy: str = "babsr_sub"
    backend: str = "supergradient"
    batch_size: int = 200
    timeout: Optional[float] = None
    max_branches: Optional[int] = None
    intermediate: str = "linear"
    supg_steps: int = 500
    supg_lr: float = 1e-4
    gnn_iters: int = boundgnn.DEFAULT_ITERS
    gnn_eta0: float = boundgnn.DEFAULT_ETA0
    gnn_schedule: str = "inv_sqrt"
    bound_threshold: float = boundgnn.FAILSAFE_THRESHOLD
    branch_threshold: float = branchgnn.FAILSAFE_THRESHOLD
    branch_params: object = None
    bound_params: object = None
    use_primal_dual: bool = True
    strong_subsample: Optional[int] = None
    seed: int = 0
    record_pruned: bool = False
    # replaces the learned bounding iteration; called as fn(net, stack, rho0) -> (rho, q)
    gnn_bounder: Optional[Callable] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown branching strategy {self.strategy!r}")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown bounding backend {self.backend!r}")
        if self.intermediate not in ("linear", "interval"):
            raise ValueError("intermediate bounds must be 'linear' or 'interval'")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


@dataclass(eq=False)
class Subdomain:
    splits: list
    stack: BoundsStack
    lower_bound: float = float("-inf")
    rho: Optional[list] = None  # multipliers that produced lower_bound
    parent_rho: Optional[list] = None
    parent_lb: Optional[float] = None
    depth: int = 0
    queue_tag: str = MAIN
    x_ub: Optional[np.ndarray] = None


@dataclass
class VerificationResult:
    status: str
    witness: Optional[np.ndarray]
    branches: int
    subdomains: int
    wall_time: float
    global_lb: List[float] = field(default_factory=list)
    global_ub: List[float] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    pruned: list = field(default_factory=list)


# ---------------------------------------------------------------- queue

class SubdomainQueue:
    """Min-heap on lower bound; ties resolved by insertion order."""

    def __init__(self):
        self._heap = []
        self._count = 0

    def push(self, sub: Subdomain):
        heapq.heappush(self._heap, (sub.lower_bound, self._count, sub))
        self._count += 1

    def __len__(self):
        return len(self._heap)

    def min_lb(self):
        return self._heap[0][0] if self._heap else float("inf")

    def pop(self):
        return heapq.heappop(self._heap)[2]

    def tagged(self, tag):
        return sum(1 for _, _, s in self._heap if s.queue_tag == tag)


def pick_out_batch(queue: SubdomainQueue, n):
    if len(queue) == 0:
        raise IndexError("pick_out from an empty queue")
    return [queue.pop() for _ in range(min(n, len(queue)))]


# ---------------------------------------------------------------- helpers

def compute_ub(net, domain, inner_or_x):
    """Network value at the bound minimizer's input, clipped into the domain."""
    x = inner_or_x.z0 if isinstance(inner_or_x, dual.InnerSolution) else inner_or_x
    x = np.clip(np.asarray(x, dtype=np.float64), domain.lower, domain.upper)
    return float(evaluate(net, x)), x


def babsr_score(net, stack):
    """``beta * |lambda|`` per hidden neuron, lambda being the backward coefficient
    of its post-activation on the output; zero for non-ambiguous neurons."""
    post, _ = backward_coefficients(net, stack)
    out = []
    for k in range(net.depth - 1):
        _, _, beta = relu_params(stack.lower[k], stack.upper[k])
        out.append(beta * np.abs(post[k]))
    return out


def _argmax_candidate(scores, stack):
    best, best_s = None, -np.inf
    for k, j in stack.ambiguous_neurons():
        if scores[k][j] > best_s:
            best, best_s = (k, j), scores[k][j]
    return best


def split_relu(net, sub: Subdomain, decision):
    """Children ``(active, inactive)`` with refreshed bounds and inherited duals."""
    k, j = decision
    children = []
    for phase in (1, -1):
        stack = refresh_after_split(net, sub.stack, (k, j, phase), sub.splits)
        children.append(Subdomain(with_split(sub.splits, k, j, phase), stack, parent_rho=sub.rho,
                                  parent_lb=sub.lower_bound, depth=sub.depth + 1, queue_tag=sub.queue_tag))
    return children[0], children[1]


def _m(parent_lb, lb1, lb2):
    if not parent_lb < 0.0:
        return 1.0
    return branchgnn.improvement_measure(parent_lb, lb1, lb2)


def strong_subset(net, stack, k_top, rng, min_frac=0.05):
    """Top-``k_top`` candidates by the cheap score plus random fill so every
    layer keeps at least ``min_frac`` of its ambiguous neurons."""
    cands = stack.ambiguous_neurons()
    if k_top is None or len(cands) <= k_top:
        return cands
    scores = babsr_score(net, stack)
    ranked = sorted(cands, key=lambda c: (-scores[c[0]][c[1]], c))
    chosen = set(ranked[:k_top])
    for k in range(net.depth - 1):
        layer = [c for c in cands if c[0] == k]
        need = int(np.ceil(min_frac * len(layer))) - sum(1 for c in chosen if c[0] == k)
        rest = [c for c in layer if c not in chosen]
        if need > 0 and rest:
            for i in rng.choice(len(rest), size=min(need, len(rest)), replace=False):
                chosen.add(rest[i])
    return sorted(chosen)


# ---------------------------------------------------------------- engine

class BabEngine:
    def __init__(self, net, domain: InputDomain, config: BabConfig):
        self.net = net
        self.domain = domain
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.stats = {"bound_calls": 0, "supergradient_routed": 0, "backup_branch": 0,
                      "infeasible_children": 0, "exact_leaves": 0, "tolerance_prunes": 0,
                      "blowups": 0}
        self.on_bound = None  # called with every list of freshly bounded subdomains
        self.on_strong = None  # called with (subdomain, candidates, m values)
        if config.strategy == "gnn" and config.branch_params is None:
            raise ValueError("gnn branching needs branch_params")
        if config.backend == "gnn" and config.bound_params is None and config.gnn_bounder is None:
            raise ValueError("gnn bounding needs bound_params")

    # bounding ---------------------------------------------------------
    def root_stack(self):
        if self.config.intermediate == "interval":
            return interval_bounds(self.net, self.domain)
        return linear_backward_bounds(self.net, self.domain)

    def _child_stack(self, sub, decision, phase):
        if self.config.intermediate == "interval":
            return interval_bounds(self.net, sub.stack, with_split(sub.splits, *decision, phase))
        return refresh_after_split(self.net, sub.stack, decision + (phase,), sub.splits)

    def make_children(self, sub, decision):
        out = []
        for phase in (1, -1):
            stack = self._child_stack(sub, decision, phase)
            out.append(Subdomain(with_split(sub.splits, *decision, phase), stack, parent_rho=sub.rho,
                                 parent_lb=sub.lower_bound, depth=sub.depth + 1, queue_tag=sub.queue_tag))
        return out

    def _supg(self, stacks, rho0):
        stack = batch_stacks(stacks)
        rho, q = dual.supergradient_ascent(self.net, stack, rho0, self.config.supg_steps,
                                           self.config.supg_lr, return_best=True)
        return rho, np.atleast_1d(q)

    def _gnn(self, stacks, rho0):
        stack = batch_stacks(stacks)
        if self.config.gnn_bounder is not None:
            rho, q = self.config.gnn_bounder(self.net, stack, rho0)
        else:
            rho, q = boundgnn.gnn_bound_solve(self.net, stack, rho0, self.config.bound_params,
                                              self.config.gnn_iters, self.config.gnn_eta0,
                                              self.config.gnn_schedule)
        # never trust the reported value; the duals alone determine a valid bound
        with np.errstate(all="ignore"):
            q = dual.dual_value(self.net, stack, rho)
        return rho, np.atleast_1d(np.asarray(q, dtype=np.float64))

    def bound(self, subs):
        """Fill ``lower_bound``, ``rho`` and ``x_ub`` of feasible subdomains in place."""
        live = [s for s in subs if not s.stack.infeasible]
        for s in subs:
            if s.stack.infeasible:
                s.lower_bound = float("inf")
        if not live:
            return
        self.stats["bound_calls"] += len(live)
        self._bound_live(live)
        if self.on_bound is not None:
            self.on_bound(live)

    def _bound_live(self, live):
        cfg = self.config
        net = self.net
        if cfg.backend == "lp":
            for s in live:
                val, x = oracle.planet_lp_solve(net, s.stack, s.splits)
                s.lower_bound = float(val)
                s.x_ub = x
                s.rho = None
            return
        stack = batch_stacks([s.stack for s in live])
        init = dual.initial_duals(net, stack)
        if cfg.backend in ("interval", "linear"):
            sol = dual.inner_minimize(net, stack, init)
            for i, s in enumerate(live):
                s.lower_bound = float(s.stack.lower[-1][0])
                s.rho = [r[i] for r in init]
                s.x_ub = sol.z0[i]
            return
        rho0 = [r.copy() for r in init]
        for i, s in enumerate(live):
            if s.parent_rho is not None:
                for k in range(len(rho0)):
                    rho0[k][i] = s.parent_rho[k]
        use_gnn = np.array([cfg.backend == "gnn" and s.queue_tag == MAIN for s in live])
        rho_out = [np.empty_like(r) for r in rho0]
        q_out = np.empty(len(live))
        redo = ~use_gnn
        if use_gnn.any():
            idx = np.nonzero(use_gnn)[0]
            try:
                rho_g, q_g = self._gnn([live[i].stack for i in idx], [r[idx] for r in rho0])
                ok = np.isfinite(q_g)
            except BoundBlowupError:
                self.stats["blowups"] += 1
                rho_g, q_g, ok = None, None, np.zeros(idx.size, dtype=bool)
            for n, i in enumerate(idx):
                s = live[i]
                accepted = bool(ok[n])
                if accepted and s.parent_lb is not None and np.isfinite(s.parent_lb):
                    accepted = boundgnn.failsafe_bound(q_g[n], s.parent_lb, cfg.bound_threshold) == boundgnn.ACCEPT
                if accepted:
                    q_out[i] = q_g[n]
                    for k in range(len(rho_out)):
                        rho_out[k][i] = rho_g[k][n]
                else:
                    s.queue_tag = SUPERGRADIENT
                    self.stats["supergradient_routed"] += 1
                    redo[i] = True
        if redo.any():
            idx = np.nonzero(redo)[0]
            rho_s, q_s = self._supg([live[i].stack for i in idx], [r[idx] for r in rho0])
            for n, i in enumerate(idx):
                q_out[i] = q_s[n]
                for k in range(len(rho_out)):
                    rho_out[k][i] = rho_s[k][n]
        sol = dual.inner_minimize(net, stack, rho_out)
        for i, s in enumerate(live):
            # the stack's own output bound is also valid; keep the better one
            s.lower_bound = float(max(q_out[i], s.stack.lower[-1][0]))
            s.rho = [r[i] for r in rho_out]
            s.x_ub = sol.z0[i]

    # branching --------------------------------------------------------
    def _bound_pairs(self, sub, decisions):
        children = []
        for d in decisions:
            children.extend(self.make_children(sub, d))
        self.bound(children)
        return [(children[2 * i], children[2 * i + 1]) for i in range(len(decisions))]

    def strong_branch(self, sub, candidates=None):
        cands = candidates if candidates is not None else strong_subset(
            self.net, sub.stack, self.config.strong_subsample, self.rng)
        if not cands:
            raise ValueError("strong branching needs at least one candidate")
        pairs = self._bound_pairs(sub, cands)
        ms = np.array([_m(sub.lower_bound, a.lower_bound, b.lower_bound) for a, b in pairs])
        best = int(np.argmax(ms))
        return cands[best], ms, pairs[best], cands

    def choose(self, sub, strategy=None):
        """Return ``(decision, children or None)``."""
        cfg = self.config
        strategy = strategy or cfg.strategy
        cands = sub.stack.ambiguous_neurons()
        if strategy == "random":
            return cands[int(self.rng.integers(len(cands)))], None
        if strategy == "babsr_sub":
            return _argmax_candidate(babsr_score(self.net, sub.stack), sub.stack), None
        if strategy == "strong":
            dec, ms, pair, cands = self.strong_branch(sub)
            if self.on_strong is not None:
                self.on_strong(sub, cands, ms)
            return dec, pair
        rho = sub.rho if sub.rho is not None else dual.initial_duals(self.net, sub.stack)
        sol = dual.inner_minimize(self.net, sub.stack, rho)
        gdec = branchgnn.score_and_decide(self.net, sub.stack, sol, rho, cfg.branch_params,
                                          cfg.use_primal_dual).neuron
        (pair,) = self._bound_pairs(sub, [gdec])
        m_gnn = _m(sub.lower_bound, pair[0].lower_bound, pair[1].lower_bound)

        def backup():
            bdec = _argmax_candidate(babsr_score(self.net, sub.stack), sub.stack)
            if bdec == gdec:
                return (bdec, pair), m_gnn
            (bpair,) = self._bound_pairs(sub, [bdec])
            return (bdec, bpair), _m(sub.lower_bound, bpair[0].lower_bound, bpair[1].lower_bound)

        choice, _, used = branchgnn.failsafe_branch(m_gnn, (gdec, pair), backup, cfg.branch_threshold)
        if used:
            self.stats["backup_branch"] += 1
        return choice

    # leaves -----------------------------------------------------------
    def solve_leaf(self, sub):
        """Exact minimum of a subdomain whose ReLUs are all fixed."""
        self.stats["exact_leaves"] += 1
        val, x = oracle.planet_lp_solve(self.net, sub.stack, sub.splits)
        sub.lower_bound = float(val)
        if x is not None:
            sub.x_ub = x
        return sub

    # main loop --------------------------------------------------------
    def _elapsed(self):
        return time.monotonic() - self._t0

    def _result(self, status, witness, lb):
        self.traj_lb.append(lb)
        self.traj_ub.append(min(0.0, self.best_ub))
        stats = dict(self.stats)
        stats["best_ub"] = self.best_ub
        stats["supergradient_queue"] = self.queue.tagged(SUPERGRADIENT)
        self.result = VerificationResult(status, witness, self.branches, 1 + self.branches,
                                         self._elapsed(), self.traj_lb, self.traj_ub, stats, self.pruned)
        return self.result

    def _check_ub(self, sub):
        if sub.x_ub is None:
            return None
        val, x = compute_ub(self.net, self.domain, sub.x_ub)
        self.best_ub = min(self.best_ub, val)
        return x if val < 0.0 else None

    def _settle(self, sub):
        """Leaf solve, counterexample check and pruning; returns a witness or None."""
        if sub.stack.infeasible:
            self.stats["infeasible_children"] += 1
            return None
        if sub.stack.num_ambiguous() == 0:
            self.solve_leaf(sub)
        w = self._check_ub(sub)
        if w is not None:
            return w
        if sub.lower_bound >= 0.0 or sub.stack.num_ambiguous() == 0:
            if sub.lower_bound < 0.0:
                # all ReLUs fixed: the exact minimum is negative only up to round-off
                self.stats["tolerance_prunes"] += 1
            if self.config.record_pruned:
                self.pruned.append(sub)
            return None
        self.queue.push(sub)
        return None

    def start(self):
        """Bound the root; returns a final result or ``None`` if branching is needed."""
        self._t0 = time.monotonic()
        self.queue = SubdomainQueue()
        self.branches = 0
        self.best_ub = float("inf")
        self.traj_lb, self.traj_ub, self.pruned = [], [], []
        self.result = None
        if self.config.timeout is not None and self._elapsed() >= self.config.timeout:
            return self._result(TIMEOUT, None, float("-inf"))
        root = Subdomain(check_splits(self.net, None), self.root_stack())
        if root.stack.infeasible:
            return self._result(VERIFIED, None, float("inf"))
        if root.stack.num_ambiguous() > 0:
            self.bound([root])
        w = self._settle(root)
        if w is not None:
            return self._result(FALSIFIED, w, root.lower_bound)
        if len(self.queue) == 0:
            return self._result(VERIFIED, None, root.lower_bound)
        return None

    def step(self, strategy=None, batch_size=None):
        """One batch of branching; returns a final result or ``None``."""
        if self.result is not None:
            return self.result
        cfg = self.config
        if len(self.queue) == 0:
            return self._result(VERIFIED, None, float("inf"))
        self.traj_lb.append(self.queue.min_lb())
        self.traj_ub.append(min(0.0, self.best_ub))
        if cfg.timeout is not None and self._elapsed() >= cfg.timeout:
            return self._result(TIMEOUT, None, self.queue.min_lb())
        if cfg.max_branches is not None and self.branches >= cfg.max_branches:
            return self._result(TIMEOUT, None, self.queue.min_lb())
        batch = pick_out_batch(self.queue, batch_size or cfg.batch_size)
        fresh, done = [], []
        for sub in batch:
            decision, pair = self.choose(sub, strategy)
            self.branches += 2
            if pair is None:
                fresh.extend(self.make_children(sub, decision))
            else:
                done.extend(pair)
        self.bound([c for c in fresh if c.stack.infeasible or c.stack.num_ambiguous() > 0])
        for c in fresh + done:
            w = self._settle(c)
            if w is not None:
                return self._result(FALSIFIED, w, min(self.queue.min_lb(), c.lower_bound))
        if len(self.queue) == 0:
            return self._result(VERIFIED, None, float("inf"))
        return None

    def run(self):
        result = self.start()
        while result is None:
            result = self.step()
        return result


def verify(net, domain, config: BabConfig = None):
    return BabEngine(net, domain, config or BabConfig()).run()


def result_record(result: VerificationResult, config: BabConfig, property_id, timing=True):
    return {"property_id": property_id, "status": result.status,
            "time_s": result.wall_time if timing else None, "branches": result.branches,
            "strategy": config.strategy, "backend": config.backend,
            "global_lb": result.global_lb[-1] if result.global_lb else None,
            "global_ub": result.global_ub[-1] if result.global_ub else None,
            "witness": None if result.witness is None else result.witness.tolist()}
