"""Poison detectors against two kinds of injected data.

A BadNets patch trigger is the sanity check: spectral signatures, QUE and
STRIP should find most of it. The synthetic informative images carry no
trigger and the victim labels them correctly, so the same detectors should
find none of them.

    python demos/04_detectors.py --train-size 2000
"""
import argparse
import os

from unlearnlab import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/demo04")
    ap.add_argument("--train-size", type=int, default=2000)
    ap.add_argument("--ipc", type=int, default=10)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    spec = harness.ScenarioSpec.make(
        seeds=[args.seed], train_size=args.train_size, ipc=args.ipc,
        config={"condense": {"iterations": 200}, "train": {"epochs": 10}},
    )
    bench = harness.detector_bench(spec, args.seed)
    print(f"BadNets attack success rate {bench.attack_success:.3f}")
    for case, reports in (("badnets", bench.badnets), ("informative", bench.informative)):
        for name, r in sorted(reports.items()):
            r.to_csv(os.path.join(args.out, f"{case}-{name}.csv"))
            print(f"{case:12s} {name:9s} flagged {len(r.flagged):4d}  tpr {r.tpr:.2f}  fpr {r.fpr:.3f}")


if __name__ == "__main__":
    main()
