"""Desk-scale networks, properties and training data for both GNNs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional

import numpy as np

from . import bab, dual
from .boundgnn import BoundSample
from .branchgnn import BranchSample
from .model import BaseNetwork, InputDomain, Layer, PropertySpec, VerificationNetwork, evaluate, merge_property
from .relax import interval_bounds

logger = logging.getLogger(__name__)

TIER_FRACTIONS = (0.22, 0.67)


# ---------------------------------------------------------------- networks

def ambiguous_fraction(net, domain):
    stack = interval_bounds(net, domain)
    amb = sum(int(stack.ambiguous(k).sum()) for k in range(net.depth - 1))
    return amb / net.num_relus


def _build(raw, scale, multi, center):
    # the first layer keeps its value at the center, only its slope changes
    W0, b0 = raw[0]
    layers = [Layer.dense(scale * W0, b0 + (1.0 - scale) * (W0 @ center))]
    layers += [Layer.dense(W, b) for W, b in raw[1:]]
    return BaseNetwork(layers) if multi else VerificationNetwork(layers)


def random_network(sizes, ambiguity_target, seed, center=None, eps_ref=0.1, tol=0.1, multi_output=False):
    """Random dense ReLU network with a controlled share of ambiguous ReLUs.

    ``sizes`` lists the input width, hidden widths and output width.  The
    first-layer weights are rescaled (with the bias adjusted so the value at
    ``center`` is unchanged) until the interval-bound share of
    ambiguous ReLUs over the box ``center +- eps_ref`` is within ``tol`` of
    ``ambiguity_target``.
    """
    if len(sizes) < 3:
        raise ValueError("need an input width, at least one hidden width and an output width")
    if not multi_output and sizes[-1] != 1:
        raise ValueError("verification networks have one output")
    rng = np.random.default_rng(seed)
    raw = []
    for i in range(len(sizes) - 1):
        W = rng.normal(size=(sizes[i + 1], sizes[i])) / np.sqrt(sizes[i])
        b = rng.normal(scale=0.1, size=sizes[i + 1])
        raw.append((W, b))
    center = np.zeros(sizes[0]) if center is None else np.asarray(center, dtype=np.float64)
    domain = InputDomain(center - eps_ref, center + eps_ref)

    def frac(log_s):
        return ambiguous_fraction(_build(raw, 10.0 ** log_s, multi_output, center), domain)

    lo, hi = -6.0, 6.0
    best_s, best_err = 0.0, np.inf
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        f = frac(mid)
        err = abs(f - ambiguity_target)
        if err < best_err - 1e-15:
            best_s, best_err = mid, err
        if f < ambiguity_target:
            lo = mid
        else:
            hi = mid
    if best_err > tol:
        for log_s in np.linspace(-6.0, 6.0, 241):
            err = abs(frac(log_s) - ambiguity_target)
            if err < best_err - 1e-15:
                best_s, best_err = log_s, err
    if best_err > tol:
        raise ValueError(f"ambiguity target {ambiguity_target} unreachable (closest miss {best_err:.3f})")
    return _build(raw, 10.0 ** best_s, multi_output, center)


# ---------------------------------------------------------------- properties

@dataclass
class PropertyRecord:
    network_path: str
    center: np.ndarray
    label: int
    adv_label: int
    epsilon: float
    tier: str
    time_s: Optional[float]
    branches: int

    def to_json(self, timing=True):
        return {"network": self.network_path, "center": np.asarray(self.center).tolist(),
                "label": self.label, "adv_label": self.adv_label, "epsilon": self.epsilon,
                "tier": self.tier, "time_s": self.time_s if timing else None, "branches": self.branches}


def difficulty_tier(effort, budget, fractions=TIER_FRACTIONS):
    if budget is None or budget <= 0:
        return "easy"
    if effort <= fractions[0] * budget:
        return "easy"
    if effort <= fractions[1] * budget:
        return "medium"
    return "hard"


def binary_search_epsilon(template: PropertySpec, lo, hi, tol, config: bab.BabConfig):
    """Largest epsilon (to ``tol``) for which the property is verified.

    Tiers are assigned from the branch count at the returned epsilon relative
    to ``config.max_branches`` when set, else from time relative to
    ``config.timeout``.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")

    def run(eps):
        net, domain = merge_property(replace(template, epsilon=eps))
        return bab.verify(net, domain, config)

    res = run(lo)
    if res.status != bab.VERIFIED:
        raise ValueError(f"property is not verified even at epsilon={lo} ({res.status})")
    best_eps, best_res = lo, res
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        res = run(mid)
        if res.status == bab.VERIFIED:
            lo, best_eps, best_res = mid, mid, res
        else:
            hi = mid
    if config.max_branches is not None:
        tier = difficulty_tier(best_res.branches, config.max_branches)
    else:
        tier = difficulty_tier(best_res.wall_time, config.timeout)
    return PropertyRecord(template.network_path, template.center, template.label, template.adv_label,
                          float(best_eps), tier, best_res.wall_time, best_res.branches)


def random_center(net, rng, clip=(0.0, 1.0)):
    return rng.uniform(clip[0], clip[1], size=net.input_dim)


def make_template(base: BaseNetwork, center, rng, network_path=None, clip=(0.0, 1.0)):
    """Property around ``center``: true label = argmax, adversarial label random."""
    out = evaluate(base, center)
    label = int(np.argmax(out))
    others = [c for c in range(out.shape[0]) if c != label]
    adv = int(others[int(rng.integers(len(others)))])
    return PropertySpec(base, label, adv, center, 1.0, clip, network_path=network_path)


# ---------------------------------------------------------------- datasets

@dataclass
class Problem:
    network_path: str
    net: VerificationNetwork
    domain: InputDomain
    timed_out: bool = False


def _rho_of(net, sub):
    return sub.rho if sub.rho is not None else dual.initial_duals(net, sub.stack)


def gen_branch_dataset(problems: List[Problem], config: bab.BabConfig, B=20, q=10, frac_full=0.25,
                       seed=0, cheap="babsr_sub"):
    """Strong-branching samples, interleaved with runs of cheap-heuristic branching."""
    samples = []
    for pi, prob in enumerate(problems):
        rng = np.random.default_rng([seed, pi])
        engine = bab.BabEngine(prob.net, prob.domain, replace(config, strategy=cheap))
        mine = []

        def grab(sub, cands, ms, prob=prob, mine=mine):
            mine.append(BranchSample(prob.network_path, sub.stack.copy(), [s.copy() for s in sub.splits],
                                     [np.array(r) for r in _rho_of(prob.net, sub)], list(cands),
                                     np.asarray(ms, dtype=np.float64)))

        engine.on_strong = grab
        full = (not prob.timed_out) and rng.random() <= frac_full
        res = engine.start()
        if full:
            while res is None:
                res = engine.step("strong")
        else:
            while res is None and len(mine) < B:
                k = int(rng.integers(0, q + 1))
                for _ in range(k):
                    res = engine.step(cheap, 1)
                    if res is not None:
                        break
                if res is not None:
                    break
                res = engine.step("strong", 1)
        logger.info("branch data: problem %d gave %d samples (%s)", pi, len(mine), "full" if full else "mixed")
        samples.extend(mine)
    return samples


def _stratified(depths, n, rng):
    """Indices picked round-robin across four equal-width depth bands."""
    depths = np.asarray(depths, dtype=np.float64)
    if len(depths) <= n:
        return list(range(len(depths)))
    lo, hi = depths.min(), depths.max()
    edges = lo + (hi - lo) * np.array([0.25, 0.5, 0.75])
    bucket = np.searchsorted(edges, depths, side="right")
    pools = [list(rng.permutation(np.nonzero(bucket == b)[0])) for b in range(4)]
    out = []
    while len(out) < n:
        for pool in pools:
            if pool and len(out) < n:
                out.append(int(pool.pop()))
    return sorted(out)


def q_supergradient(net, stacks, rhos, steps=500, lr=1e-4):
    from .relax import batch_stacks

    stack = batch_stacks(stacks)
    rho0 = [np.stack([r[k] for r in rhos]) for k in range(len(rhos[0]))]
    _, best = dual.supergradient_ascent(net, stack, rho0, steps, lr)
    return np.atleast_1d(best)


def gen_bound_dataset(problems: List[Problem], config: bab.BabConfig, rounds=3, per_property=100,
                      seed=0, trainer: Optional[Callable] = None, supg_steps=500, supg_lr=1e-4):
    """Subdomains met during BaB, with parent duals and the supergradient target.

    Round 1 runs BaB with supergradient bounding; each later round first calls
    ``trainer(samples_so_far)`` for bounding-GNN parameters and runs BaB with
    them.  Each round keeps ``per_property`` subdomains per problem, spread
    over four equal-width depth bands of its tree.
    """
    samples = []
    for rnd in range(rounds):
        if rnd == 0:
            cfg = replace(config, backend="supergradient")
        else:
            if trainer is None:
                raise ValueError("rounds after the first need a bounding-GNN trainer")
            cfg = replace(config, backend="gnn", bound_params=trainer(list(samples)))
        for pi, prob in enumerate(problems):
            rng = np.random.default_rng([seed, rnd, pi])
            seen = []

            def record(subs, seen=seen, prob=prob):
                for s in subs:
                    rho = s.parent_rho if s.parent_rho is not None else dual.initial_duals(prob.net, s.stack)
                    seen.append((s.stack.copy(), [x.copy() for x in s.splits], [np.array(r) for r in rho], s.depth))

            engine = bab.BabEngine(prob.net, prob.domain, cfg)
            engine.on_bound = record
            engine.run()
            pick = _stratified([d for *_, d in seen], per_property, rng)
            if not pick:
                continue
            chosen = [seen[i] for i in pick]
            qs = q_supergradient(prob.net, [c[0] for c in chosen], [c[2] for c in chosen], supg_steps, supg_lr)
            for (stack, splits, rho, _), qv in zip(chosen, qs):
                samples.append(BoundSample(prob.network_path, stack, splits, rho, float(qv)))
            logger.info("bound data: round %d problem %d kept %d of %d", rnd, pi, len(chosen), len(seen))
    return samples
