"""Walkthrough: condense MNIST into a few synthetic images per class, hide them
in the training set and check that the victim model does not notice.

    python demos/01_condense_and_inject.py --ipc 10 --iterations 200

Prints the test accuracy of a model trained with and without the injected
images and saves a PNG grid of the synthetic set (if matplotlib is around).
"""
import argparse
import os

import numpy as np

from unlearnlab import condense as cond
from unlearnlab import data, harness, nn


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/demo01")
    ap.add_argument("--ipc", type=int, default=10)
    ap.add_argument("--iterations", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    train = data.load_dataset("mnist", "train")
    test = data.load_dataset("mnist", "test")
    print(f"victim data: {len(train)} train / {len(test)} test images")

    # step 1: the attacker matches embedding means of real and synthetic images
    cfg = cond.CondenseConfig(ipc=args.ipc, iterations=args.iterations, seed=args.seed)
    syn = cond.condense(train, cfg)
    print(f"condensed {len(syn.labels)} images; mmd {syn.history[0]:.3f} -> {syn.history[-1]:.3f}")
    cond.save_synthetic(syn, os.path.join(args.out, "synthetic.bin"))

    # step 2: the same training recipe with and without the injection
    tc = nn.TrainConfig(epochs=args.epochs, batch_size=50, learning_rate=0.05, schedule="cosine", seed=args.seed)
    injected = data.concat(train.with_tag("base"), syn.to_dataset(harness.INFORMATIVE_ID_BASE))
    share = len(syn.labels) / len(injected)
    for name, ds in (("clean", train), ("injected", injected)):
        init = nn.init_model(nn.convnet(), args.seed, "float32")
        model, _ = nn.train(init, ds, tc)
        print(f"{name:9s} test accuracy {nn.accuracy(model, test.images, test.labels):.4f}")
    print(f"injected images make up {100 * share:.1f}% of the training set")

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    order = np.argsort(syn.labels, kind="stable")
    fig, axes = plt.subplots(syn.ipc, 10, figsize=(10, syn.ipc))
    for ax, i in zip(axes.T.ravel(), order):
        ax.imshow(syn.images[i, 0], cmap="gray", vmin=0, vmax=1)
        ax.axis("off")
    fig.savefig(os.path.join(args.out, "synthetic.png"), dpi=80)
    print("grid written to", os.path.join(args.out, "synthetic.png"))


if __name__ == "__main__":
    main()
