"""Write the desk-scale IDX datasets into a data directory.

No network downloads are involved:

* ``mnist``  - the 5,000-sample MNIST extract bundled with ``mlxtend``, split
  stratified into 4,000 train / 1,000 test images.
* ``digits`` - scikit-learn's 8x8 handwritten digits, upsampled to 20x20 and
  centred on a 28x28 canvas. Used as the out-of-distribution source.

Usage: python scripts/make_desk_data.py [DATA_DIR]   (default: ./data)
"""
import os
import sys

import numpy as np
from scipy import ndimage

from unlearnlab.data import write_idx


def _split(labels, n_test, seed):
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    test = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        test.extend(rng.choice(members, n_test // len(classes), replace=False))
    mask = np.zeros(len(labels), bool)
    mask[test] = True
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def _write(root, name, images, labels, train, test):
    out = os.path.join(root, name)
    os.makedirs(out, exist_ok=True)
    for kind, idx in (("train", train), ("t10k", test)):
        write_idx(os.path.join(out, f"{kind}-images-idx3-ubyte"), images[idx])
        write_idx(os.path.join(out, f"{kind}-labels-idx1-ubyte"), labels[idx])
    print(f"{name}: {len(train)} train / {len(test)} test -> {out}")


def mnist(root):
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    images = X.reshape(-1, 28, 28).astype(np.uint8)
    train, test = _split(y, 1000, seed=0)
    _write(root, "mnist", images, y.astype(np.uint8), train, test)


def digits(root):
    from sklearn.datasets import load_digits

    d = load_digits()
    small = d.images / 16.0
    big = np.stack([ndimage.zoom(im, 2.5, order=1) for im in small])
    canvas = np.zeros((len(big), 28, 28))
    canvas[:, 4:24, 4:24] = np.clip(big, 0, 1)
    images = np.round(canvas * 255).astype(np.uint8)
    train, test = _split(d.target, 300, seed=0)
    _write(root, "digits", images, d.target.astype(np.uint8), train, test)


if __name__ == "__main__":
    root = sys.argv[1] if len(sys.argv) > 1 else "data"
    mnist(root)
    digits(root)
