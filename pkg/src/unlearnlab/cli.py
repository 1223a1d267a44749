"""Command-line verbs: ``python -m unlearnlab {train,condense,attack,defend,budget,report}``.

Every verb reads one JSON configuration tree (``--config``; defaults fill in
anything missing), honours ``--seed`` (replacing the scenario's seed list) and
writes its outputs under ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import condense as cond
from . import data, harness, nn
from . import unlearn as ul

log = logging.getLogger("unlearnlab")


def load_spec(args) -> harness.ScenarioSpec:
    tree = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            tree = json.load(fh)
    if args.seed is not None:
        tree = harness.merge_config(tree, {"scenario": {"seeds": [args.seed]}})
    return harness.ScenarioSpec(tree)


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def cmd_train(args):
    spec = load_spec(args)
    seed = spec.seeds[0]
    train, test = harness.load_victim_data(spec, seed)
    train = train.with_tag("base")
    if args.inject:
        syn = cond.load_synthetic(args.inject)
        train = data.concat(train, syn.to_dataset(harness.INFORMATIVE_ID_BASE))
    init = nn.init_model(nn.convnet(train.num_classes, train.image_shape), seed, spec.config["train"]["precision"])
    model, ledger = nn.train(init, train, harness.train_config(spec, seed, args.ledger))
    nn.save_model(model, _out(args, "model.bin"))
    if ledger is not None:
        ledger.save(_out(args, "ledger.bin"))
    print(f"test accuracy {nn.accuracy(model, test.images, test.labels):.4f}")


def cmd_condense(args):
    spec = load_spec(args)
    seed = spec.seeds[0]
    train, _ = harness.load_victim_data(spec, seed)
    knowledge = harness.attacker_knowledge(spec, train, seed)
    cfg = harness.condense_config(spec, seed, knowledge, int(spec.scenario["ipc"]))
    syn = cond.condense(knowledge, cfg, num_classes=train.num_classes)
    cond.save_synthetic(syn, _out(args, "synthetic.bin"))
    print(f"{len(syn.labels)} synthetic images, final mmd {syn.history[-1] if syn.history else float('nan'):.4g}")


def cmd_attack(args):
    spec = load_spec(args)
    report = harness.run_scenario(spec)
    harness.emit_report(report, "csv", _out(args, "report.csv"))
    harness.emit_report(report, "json", _out(args, "report.json"))
    print(harness.summarize(report))


def cmd_defend(args):
    spec = load_spec(args)
    rows = []
    for seed in spec.seeds:
        bench = harness.detector_bench(spec, seed)
        rows += bench.rows()
        for case, reports in (("badnets", bench.badnets), ("informative", bench.informative)):
            for name, r in reports.items():
                r.to_csv(_out(args, f"scores-{case}-{name}-seed{seed}.csv"))
        print(f"seed {seed}: attack success {bench.attack_success:.3f}")
    with open(_out(args, "detectors.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['case']:12s} {r['detector']:9s} tpr {r['tpr']:.3f} fpr {r['fpr']:.3f}")


def cmd_budget(args):
    spec = load_spec(args)
    b = spec.config["budget"]
    with open(_out(args, "budget.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "kind", "id", "budget", "initial_gap", "final_gap", "flagged"])
        for seed in spec.seeds:
            run = harness.prepare_seed(spec, seed, ledger=False)
            unseen = harness.train_unseen(spec, run)
            for kind, ids in (("normal", run.control_ids), ("informative", run.informative_ids)):
                ds = run.subset(ids)
                res = ul.budget_analysis(run.model, unseen, ds.images, ds.labels, b["lr"], int(b["iterations"]))
                for i, bud, g0, g1, fl in zip(ds.ids, res.budgets, res.initial_gaps, res.final_gaps, res.flagged):
                    w.writerow([seed, kind, int(i), repr(float(bud)), repr(float(g0)), repr(float(g1)), int(fl)])
                print(f"seed {seed} {kind:11s} mean budget {np.mean(res.budgets):.4f}  "
                      f"gap closed {res.closed_fraction():.2f}")


def cmd_report(args):
    report = harness.read_report(args.input)
    if args.format:
        harness.emit_report(report, args.format, _out(args, f"report.{args.format}"))
    print(harness.summarize(report))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m unlearnlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON configuration tree")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
        p.set_defaults(fn=fn)
        return p

    p = verb("train", cmd_train, "train the victim model")
    p.add_argument("--inject", help="synthetic-set file to append to the training data")
    p.add_argument("--ledger", action="store_true", help="record per-batch updates (segregated batches)")
    verb("condense", cmd_condense, "condense the attacker's knowledge into a synthetic set")
    verb("attack", cmd_attack, "run the configured scenario and write report.csv / report.json")
    verb("defend", cmd_defend, "detector bench on the BadNets control and the informative injection")
    verb("budget", cmd_budget, "per-sample unlearning budgets for informative vs normal samples")
    p = verb("report", cmd_report, "summarize (and optionally re-emit) a saved report")
    p.add_argument("input", help="report.json or report.csv")
    p.add_argument("--format", choices=("csv", "json"))
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
