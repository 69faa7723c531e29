"""Command-line entry point: ``babverify <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys are
option names with underscores); explicit flags win over the file.  The
environment variable ``BABVERIFY_SEED`` replaces the config file's seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import OrderedDict
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import bab, boundgnn, branchgnn, datagen, dual
from .errors import EmptyDatasetError, VerificationError
from .gnn import load_params, save_params
from .model import InputDomain, load_network, load_property, merge_property, save_network
from .relax import batch_stacks, linear_backward_bounds
from .serialization import append_jsonl, dumps, read_jsonl, write_jsonl

logger = logging.getLogger("babverify")

EXIT_CODES = {bab.VERIFIED: 0, bab.FALSIFIED: 1, bab.TIMEOUT: 2}
EXIT_ERROR = 3

_BAB_OPTIONS = {
    "strategy": ("babsr_sub", str), "backend": ("supergradient", str), "batch_size": (200, int),
    "timeout": (None, float), "max_branches": (None, int), "intermediate": ("linear", str),
    "supg_steps": (500, int), "supg_lr": (1e-4, float), "gnn_iters": (100, int),
    "gnn_eta0": (1e-3, float), "gnn_schedule": ("inv_sqrt", str), "bound_threshold": (0.05, float),
    "branch_threshold": (0.2, float), "strong_subsample": (None, int),
}


# ---------------------------------------------------------------- config plumbing

def _add_bab_flags(p):
    for name, (_, typ) in _BAB_OPTIONS.items():
        p.add_argument("--" + name.replace("_", "-"), type=typ, default=None)
    p.add_argument("--branch-params", default=None, help="branching GNN parameter file")
    p.add_argument("--bound-params", default=None, help="bounding GNN parameter file")
    p.add_argument("--no-primal-dual", action="store_true", help="drop primal/dual branching features")


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log", default=None, help="append progress records to this file")
    p.add_argument("--no-timing", action="store_true", help="write null instead of wall-clock times")


def _settings(args, defaults):
    """Resolve option values: flag > BABVERIFY_SEED (seed only) > config file > default."""
    cfg = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    out = OrderedDict()
    for name, default in defaults.items():
        value = cfg.get(name, default)
        if name == "seed" and os.environ.get("BABVERIFY_SEED"):
            value = int(os.environ["BABVERIFY_SEED"])
        flag = getattr(args, name, None)
        if flag is not None and flag is not False:
            value = flag
        out[name] = value
    return out


def _bab_defaults():
    d = OrderedDict((k, v[0]) for k, v in _BAB_OPTIONS.items())
    d.update(seed=0, branch_params=None, bound_params=None, no_primal_dual=False)
    return d


def _bab_config(s):
    kw = {k: s[k] for k in _BAB_OPTIONS}
    branch = load_params(s["branch_params"], branchgnn.VARIANT) if s.get("branch_params") else None
    bound = load_params(s["bound_params"], boundgnn.VARIANT) if s.get("bound_params") else None
    return bab.BabConfig(seed=s["seed"], branch_params=branch, bound_params=bound,
                         use_primal_dual=not s.get("no_primal_dual"), **kw)


def _timing(args):
    return not getattr(args, "no_timing", False)


class _RunLog:
    def __init__(self, path):
        self.path = path

    def __call__(self, record):
        if self.path:
            append_jsonl(self.path, record)


def _read_manifest(path):
    """Property paths listed in a manifest, resolved against its directory."""
    base = Path(path).parent
    out = []
    for rec in read_jsonl(path):
        out.append((rec, base / rec["property"]))
    return out


def _problems(manifest):
    problems, networks = [], {}
    for rec, prop_path in _read_manifest(manifest):
        prop = load_property(prop_path)
        net, domain = merge_property(prop)
        key = str(prop_path)
        networks[key] = net
        problems.append(datagen.Problem(key, net, domain, rec.get("status") == bab.TIMEOUT))
    return problems, networks


def _relative(samples, data_path):
    base = Path(data_path).resolve().parent
    for s in samples:
        s.network_path = os.path.relpath(Path(s.network_path).resolve(), base)
    return samples


def _load_networks_for(samples, data_path):
    """Merged networks for dataset records, keyed by the record's path string."""
    base = Path(data_path).resolve().parent
    nets = {}
    for s in samples:
        if s.network_path not in nets:
            prop = load_property(base / s.network_path)
            nets[s.network_path] = merge_property(prop)[0]
    return nets


# ---------------------------------------------------------------- subcommands

def cmd_verify(args):
    s = _settings(args, _bab_defaults())
    config = _bab_config(s)
    if args.property:
        prop = load_property(args.property)
        net, domain = merge_property(prop)
        pid = args.property_id or Path(args.property).stem
    else:
        net = load_network(args.network)
        with open(args.domain, "r", encoding="utf-8") as fh:
            dom = json.load(fh)
        domain = InputDomain(dom["lower"], dom["upper"])
        pid = args.property_id or Path(args.network).stem
    result = bab.verify(net, domain, config)
    record = bab.result_record(result, config, pid, timing=_timing(args))
    if args.results:
        append_jsonl(args.results, {"run": dict(s, property_id=pid)})
        append_jsonl(args.results, record)
    print(dumps(record))
    return EXIT_CODES[result.status]


def cmd_gen_properties(args):
    defaults = _bab_defaults()
    defaults.update(batch_size=8, max_branches=400)
    defaults.update(count=10, sizes="5,12,12,3", ambiguity=0.5, eps_ref=0.05, eps_lo=1e-3, eps_hi=0.5,
                    eps_tol=4e-3)
    s = _settings(args, defaults)
    sizes = [int(v) for v in str(s["sizes"]).split(",")]
    out = Path(args.out)
    (out / "networks").mkdir(parents=True, exist_ok=True)
    (out / "properties").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    manifest.write_text("", encoding="utf-8")
    config = _bab_config(s)
    log = _RunLog(args.log)
    for i in range(int(s["count"])):
        rng = np.random.default_rng([int(s["seed"]), i])
        center = rng.uniform(0.0, 1.0, size=sizes[0])
        base = datagen.random_network(sizes, float(s["ambiguity"]), seed=int(rng.integers(2**31)),
                                      center=center, eps_ref=float(s["eps_ref"]), multi_output=True)
        net_rel = f"networks/net_{i:03d}.json"
        save_network(base, out / net_rel)
        template = datagen.make_template(base, center, rng, network_path="../" + net_rel)
        try:
            rec = datagen.binary_search_epsilon(template, float(s["eps_lo"]), float(s["eps_hi"]),
                                                float(s["eps_tol"]), config)
        except ValueError as exc:
            log({"property": i, "skipped": str(exc)})
            continue
        prop_rel = f"properties/prop_{i:03d}.json"
        prop_obj = {"network": "../" + net_rel, "center": center.tolist(), "epsilon": rec.epsilon,
                    "label": template.label, "adv_label": template.adv_label, "clip": [0.0, 1.0]}
        (out / prop_rel).write_text(dumps(prop_obj) + "\n", encoding="utf-8")
        entry = {"property": prop_rel}
        entry.update(rec.to_json(timing=_timing(args)))
        append_jsonl(manifest, entry)
        log(entry)
    return 0


def cmd_gen_branch_data(args):
    s = _settings(args, OrderedDict(B=20, q=10, frac_full=0.25, **_bab_defaults()))
    problems, _ = _problems(args.manifest)
    samples = datagen.gen_branch_dataset(problems, _bab_config(s), int(s["B"]), int(s["q"]),
                                         float(s["frac_full"]), int(s["seed"]))
    write_jsonl(args.out, [x.to_json() for x in _relative(samples, args.out)])
    _RunLog(args.log)({"branch_samples": len(samples)})
    return 0


def cmd_gen_bound_data(args):
    s = _settings(args, OrderedDict(rounds=3, per_property=100, train_epochs=10, train_lr=1e-2,
                                    **_bab_defaults()))
    problems, networks = _problems(args.manifest)
    log = _RunLog(args.log)

    def trainer(samples):
        params, _ = boundgnn.train_bound_gnn(samples, boundgnn.bound_params(seed=int(s["seed"])), networks,
                                             boundgnn.BoundTrainConfig(lr=float(s["train_lr"]),
                                                                       epochs=int(s["train_epochs"]),
                                                                       seed=int(s["seed"])), log=log)
        return params

    samples = datagen.gen_bound_dataset(problems, _bab_config(s), int(s["rounds"]), int(s["per_property"]),
                                        int(s["seed"]), trainer, int(s["supg_steps"]), float(s["supg_lr"]))
    write_jsonl(args.out, [x.to_json() for x in _relative(samples, args.out)])
    log({"bound_samples": len(samples)})
    return 0


def _read_samples(path, cls):
    records = read_jsonl(path)
    if not records:
        raise EmptyDatasetError("empty dataset")
    return [cls.from_json(r) for r in records]


def cmd_train_branch(args):
    s = _settings(args, OrderedDict(lr=1e-4, weight_decay=1e-4, batch_size=2, max_epochs=200, patience=10,
                                    stop_after=20, p=64, seed=0, no_primal_dual=False))
    samples = _read_samples(args.data, branchgnn.BranchSample)
    nets = _load_networks_for(samples, args.data)
    cfg = branchgnn.BranchTrainConfig(lr=float(s["lr"]), weight_decay=float(s["weight_decay"]),
                                      batch_size=int(s["batch_size"]), max_epochs=int(s["max_epochs"]),
                                      patience=int(s["patience"]), stop_after=int(s["stop_after"]),
                                      seed=int(s["seed"]), use_primal_dual=not s["no_primal_dual"])
    init = branchgnn.branch_params(int(s["p"]), seed=int(s["seed"]))
    params, _ = branchgnn.train_branch_gnn(samples, init, nets, cfg, log=_RunLog(args.log))
    save_params(params, args.out)
    return 0


def cmd_train_bound(args):
    s = _settings(args, OrderedDict(lr=1e-2, epochs=50, K=100, gamma=0.99, eta0=1e-3, schedule="inv_sqrt",
                                    batch_size=64, p=32, seed=0))
    samples = _read_samples(args.data, boundgnn.BoundSample)
    nets = _load_networks_for(samples, args.data)
    cfg = boundgnn.BoundTrainConfig(lr=float(s["lr"]), epochs=int(s["epochs"]), K=int(s["K"]),
                                    gamma=float(s["gamma"]), eta0=float(s["eta0"]), schedule=s["schedule"],
                                    batch_size=int(s["batch_size"]), seed=int(s["seed"]))
    init = boundgnn.bound_params(int(s["p"]), seed=int(s["seed"]))
    params, _ = boundgnn.train_bound_gnn(samples, init, nets, cfg, log=_RunLog(args.log))
    save_params(params, args.out)
    return 0


def cmd_eval_bounds(args):
    s = _settings(args, OrderedDict(supg_steps=500, supg_lr=1e-4, gnn_iters=100, eta0=1e-3,
                                    schedule="inv_sqrt", seed=0))
    samples = _read_samples(args.data, boundgnn.BoundSample)
    nets = _load_networks_for(samples, args.data)
    params = load_params(args.bound_params, boundgnn.VARIANT) if args.bound_params else None
    rows = []
    for i, smp in enumerate(samples):
        net = nets[smp.network_path]
        _, q_s = dual.supergradient_ascent(net, smp.stack, smp.parent_rho, int(s["supg_steps"]),
                                           float(s["supg_lr"]))
        row = OrderedDict(index=i, network=smp.network_path, q_linear=float(smp.stack.lower[-1][0]),
                          q_parent=float(dual.dual_value(net, smp.stack, smp.parent_rho)), q_supergradient=q_s)
        if params is not None:
            _, q_g = boundgnn.gnn_bound_solve(net, smp.stack, smp.parent_rho, params, int(s["gnn_iters"]),
                                              float(s["eta0"]), s["schedule"])
            row["q_gnn"] = q_g
        rows.append(row)
    write_jsonl(args.out, rows)
    return 0


def export_cactus(results_path, out_path):
    """Per method, sorted solve times and the cumulative share of properties solved."""
    if not Path(results_path).exists():
        raise FileNotFoundError(results_path)
    groups = OrderedDict()
    for rec in read_jsonl(results_path):
        if "status" not in rec:
            continue
        method = f"{rec['strategy']}/{rec['backend']}"
        groups.setdefault(method, []).append(rec)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "time_s", "percent_solved"])
        for method, recs in groups.items():
            solved = sorted(r["time_s"] for r in recs if r["status"] in (bab.VERIFIED, bab.FALSIFIED)
                            and r["time_s"] is not None)
            for i, t in enumerate(solved, start=1):
                writer.writerow([method, format(t, ".17g"), format(100.0 * i / len(recs), ".17g")])


def cmd_export_cactus(args):
    export_cactus(args.results, args.out)
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="babverify", description="Branch-and-bound ReLU network verification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="verify one property")
    _add_common(p)
    _add_bab_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--property", help="property JSON file")
    src.add_argument("--network", help="scalar-output network JSON (with --domain)")
    p.add_argument("--domain", help='JSON {"lower": [...], "upper": [...]}')
    p.add_argument("--property-id", default=None)
    p.add_argument("--results", default=None, help="append the resolved config and the result record here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-properties", help="generate networks and epsilon-searched properties")
    _add_common(p)
    _add_bab_flags(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--sizes", default=None, help="comma-separated widths, input first, classes last")
    p.add_argument("--ambiguity", type=float, default=None)
    p.add_argument("--eps-ref", type=float, default=None)
    p.add_argument("--eps-lo", type=float, default=None)
    p.add_argument("--eps-hi", type=float, default=None)
    p.add_argument("--eps-tol", type=float, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_properties)

    p = sub.add_parser("gen-branch-data", help="strong-branching training samples")
    _add_common(p)
    _add_bab_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--B", type=int, default=None)
    p.add_argument("--q", type=int, default=None)
    p.add_argument("--frac-full", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_branch_data)

    p = sub.add_parser("gen-bound-data", help="bounding training samples")
    _add_common(p)
    _add_bab_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--per-property", type=int, default=None)
    p.add_argument("--train-epochs", type=int, default=None)
    p.add_argument("--train-lr", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_bound_data)

    p = sub.add_parser("train-branch", help="train the branching GNN")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    for name, typ in (("lr", float), ("weight-decay", float), ("batch-size", int), ("max-epochs", int),
                      ("patience", int), ("stop-after", int), ("p", int)):
        p.add_argument("--" + name, type=typ, default=None)
    p.add_argument("--no-primal-dual", action="store_true")
    p.set_defaults(func=cmd_train_branch)

    p = sub.add_parser("train-bound", help="train the bounding GNN")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    for name, typ in (("lr", float), ("epochs", int), ("K", int), ("gamma", float), ("eta0", float),
                      ("schedule", str), ("batch-size", int), ("p", int)):
        p.add_argument("--" + name, type=typ, default=None)
    p.set_defaults(func=cmd_train_bound)

    p = sub.add_parser("eval-bounds", help="per-subdomain bound table for several backends")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--bound-params", default=None)
    p.add_argument("--out", required=True)
    for name, typ in (("supg-steps", int), ("supg-lr", float), ("gnn-iters", int), ("eta0", float),
                      ("schedule", str)):
        p.add_argument("--" + name, type=typ, default=None)
    p.set_defaults(func=cmd_eval_bounds)

    p = sub.add_parser("export-cactus", help="cactus-plot CSV from a results file")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_cactus)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EmptyDatasetError:
        print("error: empty dataset", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError, VerificationError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
