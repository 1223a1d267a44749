"""Independent reference computations shared by the test modules."""
import struct

import numpy as np
import torch

from unlearnlab import nn


def random_spec(rng, max_params=5000):
    """A small random architecture from the supported layer set."""
    while True:
        kind = rng.integers(3)
        k = int(rng.integers(2, 5))
        size = int(rng.choice([6, 8]))
        ch = int(rng.integers(1, 3))
        if kind == 0:
            spec = nn.mlp(k, (ch, size, size), tuple(int(h) for h in rng.integers(3, 12, rng.integers(1, 3))))
        else:
            width = int(rng.integers(2, 6))
            spec = nn.convnet(k, (ch, size, size), width, int(rng.integers(1, 3)))
        if spec.num_params <= max_params:
            return spec


def random_model(rng, spec=None, scale=1.0):
    spec = spec or random_spec(rng)
    m = nn.init_model(spec, int(rng.integers(2**31)))
    return m.with_params(m.params * scale)


def random_batch(rng, spec, n=4):
    x = rng.uniform(0, 1, (n,) + spec.input_shape)
    y = rng.integers(0, spec.num_classes, n)
    return x, y


def fd_grad(f, theta, eps=1e-4):
    """Central differences of a scalar function, one coordinate at a time."""
    g = np.empty_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (f(theta + e) - f(theta - e)) / (2 * eps)
    return g


def relu_pattern(model, x):
    """Signs of every ReLU input; a change means a stencil straddles a kink."""
    p = model.tensor(model.params)
    t = model.tensor(x)
    out = []
    with torch.no_grad():
        for i, layer in enumerate(model.spec.layers):
            if layer.kind == "relu":
                out.append((t > 0).numpy().ravel())
            t = nn.apply_layers(nn.NetworkSpec(model.spec.layers[i : i + 1], model.spec.num_classes,
                                               tuple(t.shape[1:]), head=False), _slice_params(model.spec, i, p), t)
    return np.concatenate(out) if out else np.zeros(0, bool)


def _slice_params(spec, i, p):
    segs = [s for s in spec.segments() if s.layer == i]
    if not segs:
        return p[:0]
    return p[segs[0].offset : segs[-1].offset + segs[-1].length]


def fd_grad_params(model, x, y, eps=1e-4, chunk=256):
    """Central differences of the mean loss, all coordinates at once.

    Only forward evaluations are used; ``torch.vmap`` batches the 2n
    perturbed parameter vectors.
    """
    xt = model.tensor(x)
    yt = torch.as_tensor(np.asarray(y, dtype=np.int64))

    def loss(p):
        return torch.nn.functional.cross_entropy(nn.apply_layers(model.spec, p, xt), yt)

    n = len(model.params)
    out = np.empty(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        e = np.zeros((len(idx), n))
        e[np.arange(len(idx)), idx] = eps
        plus = torch.vmap(loss)(model.tensor(model.params + e)).double().numpy()
        minus = torch.vmap(loss)(model.tensor(model.params - e)).double().numpy()
        out[idx] = (plus - minus) / (2 * eps)
    return out


def kink_crossed(model, x, i, eps=1e-4):
    """True when moving coordinate ``i`` by +-eps flips some ReLU input sign."""
    e = np.zeros_like(model.params)
    e[i] = eps
    return not np.array_equal(relu_pattern(model.with_params(model.params + e), x),
                              relu_pattern(model.with_params(model.params - e), x))


def grad_check(model, x, y, eps=1e-4, tol=1e-4):
    """Max relative error of grad_params over coordinates whose stencil stays on one
    side of every ReLU kink, plus the number of excluded coordinates."""
    g = nn.grad_params(model, x, y)
    fd = fd_grad_params(model, x, y, eps)
    scale = max(np.abs(g).max(), np.abs(fd).max(), 1e-300)
    suspect = np.flatnonzero(np.abs(g - fd) > tol * scale)
    excluded = np.array([i for i in suspect if kink_crossed(model, x, i, eps)], dtype=np.int64)
    keep = np.ones(len(g), bool)
    keep[excluded] = False
    return float(np.abs(g - fd)[keep].max() / scale), len(excluded)


def rel_err(a, b):
    """Max-norm error relative to the larger max-norm of the two."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return float(np.abs(a - b).max() / scale)


def log_softmax_loss(logits, labels):
    """Mean negative log-softmax probability computed by hand."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def parse_idx(path):
    """Byte-level IDX reader written independently of the package."""
    with open(path, "rb") as fh:
        raw = fh.read()
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    dims = [struct.unpack(">I", raw[4 + 4 * i : 8 + 4 * i])[0] for i in range(ndim)]
    assert zero == 0 and code == 0x08
    body = raw[4 + 4 * ndim :]
    return dims, body
