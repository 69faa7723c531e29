"""Acceptance suite: one PASS/FAIL line per criterion, printed and summarised.

Run alone with ``pytest tests/test_acceptance.py -v -s``.  The full suite
takes roughly half an hour on one core, dominated by the bounding-GNN run.
"""

import itertools
import time

import numpy as np
import pytest

from babverify import bab, datagen, dual, oracle
from babverify import boundgnn as bg
from babverify import branchgnn as br
from babverify.cli import main
from babverify.gnn import Graph
from babverify.model import InputDomain, evaluate
from babverify.relax import batch_stacks, interval_bounds, linear_backward_bounds

from conftest import shift_output, tiny_problem, verdict

pytestmark = pytest.mark.slow

SLACK = 1e-6


def _tiny_suite(n=20, start=0):
    return [tiny_problem(s, sizes=(3, 5, 5, 1)) for s in range(start, start + n)]


def _desk_problem(seed, margin=0.005):
    """Width-12 desk network whose exact minimum over the box sits at ``margin``."""
    net = datagen.random_network([5, 12, 12, 1], 0.5, seed=seed, center=np.full(5, 0.5), eps_ref=0.1)
    dom = InputDomain(np.full(5, 0.4), np.full(5, 0.6))
    shift_output(net, margin - oracle.exhaustive_verify(net, dom).minimum)
    return net, dom


def _rand_rho(net, rng, scale=1.0):
    return [scale * rng.normal(size=n) for n in net.hidden_sizes]


# ------------------------------------------------------------------ 1
def test_c01_soundness_sandwich(capsys):
    t0 = time.time()
    shapes = [(3, 8, 8, 1), (4, 12, 12, 1), (3, 6, 6, 6, 1), (2, 16, 8, 1), (4, 8, 8, 8, 1)]
    worst, violations = -np.inf, 0
    for i in range(50):
        sizes = shapes[i % len(shapes)]
        net, dom = tiny_problem(1000 + i, sizes=sizes, ambiguity=0.5)
        st_i, st_l = interval_bounds(net, dom), linear_backward_bounds(net, dom)
        _, q_star = dual.supergradient_ascent(net, st_l, dual.initial_duals(net, st_l), 500, 1e-3)
        chain = [st_i.lower[-1][0], st_l.lower[-1][0], float(q_star), oracle.planet_lp_bound(net, st_l),
                 oracle.exhaustive_verify(net, dom).minimum]
        gaps = [a - b for a, b in zip(chain, chain[1:])]
        worst = max(worst, max(gaps))
        violations += sum(g > SLACK for g in gaps)
    elapsed = time.time() - t0
    ok = violations == 0 and elapsed <= 600
    verdict(capsys, 1, ok, f"50 nets, {violations} sandwich violations (worst excess {worst:.2e}), "
                           f"{elapsed:.0f}s of 600s")


# ------------------------------------------------------------------ 2
def test_c02_dual_validity(capsys):
    rng = np.random.default_rng(2)
    bad, worst = 0, -np.inf
    for net, dom in _tiny_suite():
        st = linear_backward_bounds(net, dom)
        lp = oracle.planet_lp_bound(net, st)
        for i in range(50):
            excess = dual.dual_value(net, st, _rand_rho(net, rng, 10.0 ** rng.uniform(-2, 1))) - lp
            worst = max(worst, excess)
            bad += excess > SLACK
    verdict(capsys, 2, bad == 0, f"1000 random duals, {bad} exceed the LP bound (max excess {worst:.2e})")


# ------------------------------------------------------------------ 3
def _one_sided_agree(net, st, rho, h=1e-6, tol=1e-7):
    q0 = dual.dual_value(net, st, rho)
    for k, j in ((k, j) for k in range(len(rho)) for j in range(rho[k].size)):
        plus = [r.copy() for r in rho]
        minus = [r.copy() for r in rho]
        plus[k][j] += h
        minus[k][j] -= h
        if abs((dual.dual_value(net, st, plus) - q0) - (q0 - dual.dual_value(net, st, minus))) > tol * h:
            return False
    return True


def test_c03_supergradient(capsys):
    rng = np.random.default_rng(3)
    suite = [(net, linear_backward_bounds(net, dom)) for net, dom in _tiny_suite()]
    points, worst, fd_bad = 0, 0.0, 0
    h = 1e-6
    while points < 200:
        net, st = suite[points % len(suite)]
        rho = _rand_rho(net, rng)
        if not _one_sided_agree(net, st, rho):
            continue
        g = dual.supergradient(dual.inner_minimize(net, st, rho))
        for k in range(len(rho)):
            for j in range(rho[k].size):
                plus = [r.copy() for r in rho]
                minus = [r.copy() for r in rho]
                plus[k][j] += h
                minus[k][j] -= h
                fd = (dual.dual_value(net, st, plus) - dual.dual_value(net, st, minus)) / (2 * h)
                rel = abs(fd - g[k][j]) / max(abs(g[k][j]), 1e-3)
                worst = max(worst, rel)
                fd_bad += rel > 1e-4
        points += 1
    probe_bad = 0
    for i in range(10_000):
        net, st = suite[i % len(suite)]
        rho, other = _rand_rho(net, rng), _rand_rho(net, rng)
        sol = dual.inner_minimize(net, st, rho)
        lin = float(sol.q) + sum(float(np.dot(gk, o - r)) for gk, o, r in zip(dual.supergradient(sol), other, rho))
        probe_bad += dual.dual_value(net, st, other) > lin + 1e-9
    ok = fd_bad == 0 and probe_bad == 0
    verdict(capsys, 3, ok, f"200 points: {fd_bad} finite-difference mismatches (worst rel {worst:.1e}); "
                           f"10000 probes: {probe_bad} inequality violations")


# ------------------------------------------------------------------ 4
def test_c04_ascent_operating_point(capsys):
    gaps = []
    for net, dom in _tiny_suite():
        st = linear_backward_bounds(net, dom)
        lp = oracle.planet_lp_bound(net, st)
        _, q = dual.supergradient_ascent(net, st, dual.initial_duals(net, st), 500, 1e-4)
        gaps.append((lp - float(q)) / max(abs(lp), 1e-9))
    gaps = np.array(gaps)
    share = float(np.mean(gaps <= 1e-3))
    verdict(capsys, 4, share >= 0.9, f"{share:.0%} of 20 nets within 1e-3 relative gap after 500 steps at "
                                     f"lr 1e-4 (median gap {np.median(gaps):.2e}, need 90%)")


# ------------------------------------------------------------------ 5
def test_c05_prop1_golden(capsys):
    p = bg.prop1_parameters()
    worst_dir = 0.0
    for s in range(100):
        rng = np.random.default_rng(500 + s)
        net, dom = tiny_problem(s % 20, sizes=(3, 5, 4, 1))
        st = linear_backward_bounds(net, dom)
        rho = _rand_rho(net, rng, 10.0 ** rng.uniform(-1, 1))
        sol = dual.inner_minimize(net, st, rho)
        d = bg.bound_directions(Graph(p), net, bg.build_bound_features(rho, sol), p)
        worst_dir = max(worst_dir, max(float(np.max(np.abs(a - b))) for a, b in zip(d, dual.supergradient(sol))))
    worst_traj = 0.0
    for s in range(5):
        net, dom = tiny_problem(s, sizes=(3, 5, 4, 1))
        st = linear_backward_bounds(net, dom)
        rho = _rand_rho(net, np.random.default_rng(s))
        trace = []
        bg.gnn_bound_solve(net, st, rho, p, iters=100, trace=trace)
        rhos, qs = dual.supergradient_steps(net, st, rho, [bg.step_size(t) for t in range(1, 101)])
        for (r_g, q_g), r_s, q_s in zip(trace, rhos[1:], qs[1:]):
            worst_traj = max(worst_traj, abs(float(q_g) - float(q_s)),
                             max(float(np.max(np.abs(a - b))) for a, b in zip(r_g, r_s)))
    ok = worst_dir <= 1e-12 and worst_traj <= 1e-12
    verdict(capsys, 5, ok, f"direction error {worst_dir:.1e} over 100 states, trajectory error "
                           f"{worst_traj:.1e} over 5x100 steps")


# ------------------------------------------------------------------ 6
def _fd_check(params, loss_fn, grads, h=1e-6):
    worst, bad, total = 0.0, 0, 0
    for name, val in params.items():
        for idx in np.ndindex(val.shape):
            plus, minus = params.copy(), params.copy()
            plus[name][idx] += h
            minus[name][idx] -= h
            fd = (loss_fn(plus) - loss_fn(minus)) / (2 * h)
            err = abs(fd - grads[name][idx]) / max(abs(fd), abs(grads[name][idx]), 1e-4)
            worst = max(worst, err)
            bad += err > 1e-3
            total += 1
    return worst, bad, total


def test_c06_gradient_checks(capsys):
    net, dom = tiny_problem(4, sizes=(3, 5, 4, 1))
    st = linear_backward_bounds(net, dom)
    rng = np.random.default_rng(6)
    rho = [rng.normal(size=(2, n)) for n in net.hidden_sizes]
    stb = batch_stacks([st, st])
    p = bg.bound_params(6, seed=2)
    q_supg = np.array([10.0, 10.0])
    counts = bg.neighbor_counts(net)
    _, grads, ro = bg.loss_and_grad(p, net, stb, rho, q_supg, K=3, eta0=0.3, counts=counts)
    bw, bb, bt = _fd_check(p, lambda q: bg.surrogate_loss(q, net, ro, q_supg, counts=counts), grads)

    rho1 = dual.initial_duals(net, st)
    sol = dual.inner_minimize(net, st, rho1)
    cands = br.candidate_list(br.build_branch_features(net, st, sol, rho1))
    m = np.random.default_rng(0).uniform(0, 1, len(cands))
    sample = br.BranchSample("n", st, [np.zeros(n, dtype=np.int8) for n in net.hidden_sizes], rho1, cands, m)
    prep = br.prepare_samples([sample], {"n": net}, br.BranchTrainConfig())[0]
    q = br.branch_params(4, seed=3)
    _, g2 = br.sample_loss_grad(q, prep)
    rw, rb, rt = _fd_check(q, lambda pp: br.sample_loss_grad(pp, prep, record=False)[0], g2)
    verdict(capsys, 6, bb == 0 and rb == 0,
            f"bounding GNN (K=3): {bb}/{bt} entries off, worst rel {bw:.1e}; "
            f"branching GNN: {rb}/{rt} entries off, worst rel {rw:.1e}")


# ------------------------------------------------------------------ 7
def test_c07_bab_completeness(capsys):
    branch_p, bound_p = br.branch_params(seed=0), bg.bound_params(seed=0)
    disagree, bad_witness, runs = [], 0, 0
    for i in range(30):
        net, dom = tiny_problem(50 + i, sizes=(3, 5, 5, 1))
        shift_output(net, (0.01 if i % 2 else -0.01) - oracle.exhaustive_verify(net, dom).minimum)
        truth = oracle.exhaustive_verify(net, dom)
        want = bab.FALSIFIED if truth.status == "SAT" else bab.VERIFIED
        for strategy, backend in itertools.product(bab.STRATEGIES, bab.BACKENDS):
            cfg = bab.BabConfig(strategy=strategy, backend=backend, batch_size=4, supg_steps=30, supg_lr=1e-3,
                                gnn_iters=20, branch_params=branch_p, bound_params=bound_p)
            res = bab.verify(net, dom, cfg)
            runs += 1
            if res.status != want:
                disagree.append((i, strategy, backend, res.status))
            if res.status == bab.FALSIFIED:
                x = np.asarray(res.witness)
                inside = np.all(x >= dom.lower - 1e-12) and np.all(x <= dom.upper + 1e-12)
                bad_witness += not (inside and float(evaluate(net, x)) < 0 and truth.minimum < 0)
    ok = not disagree and bad_witness == 0
    verdict(capsys, 7, ok, f"{runs} runs over 30 properties x {len(bab.STRATEGIES)} strategies x "
                           f"{len(bab.BACKENDS)} backends: {len(disagree)} status mismatches, "
                           f"{bad_witness} bad witnesses")


# ------------------------------------------------------------------ 8
def test_c08_branching_value(capsys):
    train = [datagen.Problem(f"t{s}", *_desk_problem(s)) for s in range(400, 412)]
    samples = datagen.gen_branch_dataset(train, bab.BabConfig(batch_size=8, max_branches=400), B=20, q=3)
    params, _ = br.train_branch_gnn(samples, br.branch_params(seed=0), {p.network_path: p.net for p in train},
                                    br.BranchTrainConfig(max_epochs=30))
    counts = {"random": [], "strong": [], "gnn": []}
    for s in range(300, 320):
        net, dom = _desk_problem(s)
        for strategy in counts:
            res = bab.verify(net, dom, bab.BabConfig(strategy=strategy, batch_size=8, max_branches=1000,
                                                     branch_params=params))
            counts[strategy].append(res.branches)
    c = {k: np.array(v) for k, v in counts.items()}
    share = float(np.mean(c["strong"] <= c["random"]))
    mean = {k: float(v.mean()) for k, v in c.items()}
    reduction = 1.0 - mean["gnn"] / mean["random"]
    soft = mean["strong"] <= mean["gnn"] <= mean["random"] and reduction >= 0.2
    verdict(capsys, 8, share >= 0.8,
            f"strong <= random on {share:.0%} of 20 (need 80%); mean branches random {mean['random']:.1f}, "
            f"strong {mean['strong']:.1f}, gnn {mean['gnn']:.1f} ({reduction:.0%} below random; "
            f"soft ordering {'met' if soft else 'not met'}, {len(samples)} training samples)")


# ------------------------------------------------------------------ 9
def test_c09_bounding_value(capsys):
    problems = []
    for i in range(30):
        net = datagen.random_network([5, 16, 16, 1], 0.7, seed=100 + i, center=np.full(5, 0.5), eps_ref=0.1)
        dom = InputDomain(np.full(5, 0.4), np.full(5, 0.6))
        shift_output(net, 0.005 - oracle.exhaustive_verify(net, dom, max_relus=40).minimum)
        problems.append(datagen.Problem(f"n{i}", net, dom))
    cfg = bab.BabConfig(strategy="babsr_sub", backend="supergradient", batch_size=8, max_branches=400)
    samples = datagen.gen_bound_dataset(problems, cfg, rounds=1, per_property=100)
    nets = {p.network_path: p.net for p in problems}
    held = {f"n{i}" for i in range(25, 30)}
    train = [s for s in samples if s.network_path not in held]
    test = [s for s in samples if s.network_path in held]
    params, _ = bg.train_bound_gnn(train, bg.bound_params(seed=0), nets, bg.BoundTrainConfig(lr=1e-2, epochs=10))
    target = np.array([s.q_supg for s in test])
    q = bg.evaluate_bound_gnn(params, test, nets, iters=100)
    share = float(np.mean(q >= target - bg.default_kappa(target)))
    ok = share >= 0.6 and len(train) >= 2000
    verdict(capsys, 9, ok, f"{share:.1%} of {len(test)} held-out subdomains reach q_supg - kappa in 100 "
                           f"iterations (need 60%); trained on {len(train)} subdomains")


# ------------------------------------------------------------------ 10
def test_c10_loss_anchors(capsys):
    checks = [
        br.hinge_rank_loss([0.0, 1.0], [0, 1]) == 0.0,
        br.hinge_rank_loss([0.5, 0.5], [0, 1]) == 1.0,
        br.hinge_rank_loss([0.0, 0.0, 0.0], [0, 1, 2]) == 1.0,
        abs(bg.bound_loss([0.5], 10.0, 0.99) + 0.495) <= 1e-15,
        abs(bg.bound_loss([0.5, 1.0], 10.0, 0.99) + 1.4751) <= 1e-12,
        bg.bound_loss([0.5, 1.0], 0.5, 0.99, kappa=0.01) == 0.0,
        abs(br.improvement_measure(-1.0, -0.5, -0.3) - 0.6) <= 1e-15,
        br.improvement_measure(-1.0, 0.2, 0.0) == 1.0,
        br.improvement_measure(-1.0, -1.0, -1.0) == 0.0,
    ]
    verdict(capsys, 10, all(checks), f"{sum(checks)}/{len(checks)} hand-computed anchors reproduced")


# ------------------------------------------------------------------ 11
def _diverging(net, stack, rho0):
    rho = [r * 1e6 + np.sign(r + 1e-3) * 1e6 for r in rho0]
    return rho, np.full(rho[0].shape[0], 1e9)


def test_c11_failsafe_safety(capsys):
    unsound, pruned, routed_runs, tagged = 0, 0, 0, 0
    for i in range(10):
        net = datagen.random_network([4, 6, 6, 1], 0.6, seed=200 + i, center=np.full(4, 0.5))
        dom = InputDomain(np.full(4, 0.35), np.full(4, 0.65))
        shift_output(net, (0.01 if i % 2 else -0.01) - oracle.exhaustive_verify(net, dom).minimum)
        seen = []
        cfg = bab.BabConfig(backend="gnn", gnn_bounder=_diverging, batch_size=4, record_pruned=True, supg_steps=50)
        engine = bab.BabEngine(net, dom, cfg)
        engine.on_bound = lambda subs, seen=seen: seen.extend(s.queue_tag for s in subs)
        res = engine.run()
        truth = oracle.exhaustive_verify(net, dom).status
        unsound += res.status == bab.VERIFIED and truth == "SAT"
        for sub in res.pruned:
            pruned += 1
            unsound += oracle.exhaustive_verify(net, dom, splits=sub.splits).minimum < 0
        routed_runs += res.stats["supergradient_routed"] > 0 or res.branches == 0
        tagged += seen.count(bab.SUPERGRADIENT)
    ok = unsound == 0 and routed_runs == 10 and tagged > 0
    verdict(capsys, 11, ok, f"{unsound} unsound prunes among {pruned} pruned subdomains; rerouting seen in "
                            f"{routed_runs}/10 runs, {tagged} subdomains bounded from the supergradient queue")


# ------------------------------------------------------------------ 12
def _pipeline(root):
    gen = ["gen-properties", "--count", "3", "--sizes", "4,6,6,3", "--max-branches", "40", "--eps-tol", "0.05",
           "--supg-steps", "20", "--seed", "5", "--no-timing", "--out", str(root / "props")]
    assert main(gen) == 0
    manifest = root / "props" / "manifest.jsonl"
    common = ["--manifest", str(manifest), "--supg-steps", "20", "--max-branches", "20", "--seed", "5"]
    assert main(["gen-branch-data", *common, "--out", str(root / "branch.jsonl"), "--B", "2", "--q", "1"]) == 0
    assert main(["gen-bound-data", *common, "--out", str(root / "bound.jsonl"), "--rounds", "1",
                 "--per-property", "5"]) == 0
    for prop in sorted((root / "props" / "properties").iterdir()):
        main(["verify", "--property", str(prop), "--strategy", "random", "--seed", "5", "--supg-steps", "20",
              "--max-branches", "100", "--no-timing", "--results", str(root / "results.jsonl")])
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c12_determinism(tmp_path, capsys):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    differing = [str(k) for k in a if a[k] != b.get(k)]
    ok = a.keys() == b.keys() and not differing
    verdict(capsys, 12, ok, f"{len(a)} files compared across two seeded runs, {len(differing)} differ")
