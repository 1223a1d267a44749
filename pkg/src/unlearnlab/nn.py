"""ConvNet engine over flat float64 parameter vectors.

Parameters live in a float64 numpy vector with a fixed segment table; torch is
used only as the differentiation/kernel backend (one thread). A model's
``precision`` picks the compute dtype: float64 for derivative checks, float32
for the experiment-scale runs where double-precision convolutions are slow.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, FormatError, InputShapeError, LabelError
from .ledger import LedgerEntry, UpdateLedger

logger = logging.getLogger(__name__)

NORM_EPS = 1e-5

_configured = False


def _setup_torch():
    # fixed thread count keeps reductions in a fixed order
    global _configured
    if not _configured:
        torch.set_num_threads(1)
        _configured = True


PRECISIONS = {"float64": torch.float64, "float32": torch.float32}


def as_tensor(a, requires_grad=False, dtype=torch.float64) -> torch.Tensor:
    _setup_torch()
    t = torch.as_tensor(np.asarray(a, dtype=np.float64)).to(dtype)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


# ---------------------------------------------------------------- network description


@dataclass(frozen=True)
class Layer:
    """One layer descriptor. Only the fields relevant to ``kind`` are used."""

    kind: str
    kernel: int = 0
    in_ch: int = 0
    out_ch: int = 0
    pad: int = 0

    def to_dict(self):
        return {k: v for k, v in dataclasses.asdict(self).items() if v or k == "kind"}


def conv(kernel, in_ch, out_ch, pad=None):
    return Layer("conv", kernel, in_ch, out_ch, kernel // 2 if pad is None else pad)


def linear(in_features, out_features):
    return Layer("linear", 0, in_features, out_features)


def channel_norm():
    return Layer("channel_norm")


def relu():
    return Layer("relu")


def avgpool():
    return Layer("avgpool")


def flatten():
    return Layer("flatten")


_LAYER_KINDS = {"conv", "linear", "channel_norm", "relu", "avgpool", "flatten"}


@dataclass(frozen=True)
class Segment:
    layer: int
    name: str
    offset: int
    length: int
    shape: tuple


def _out_shape(layer, shape):
    kind = layer.kind
    if kind == "conv":
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ConfigurationError(f"conv expects {layer.in_ch} channels, got shape {shape}")
        _, h, w = shape
        oh = h + 2 * layer.pad - layer.kernel + 1
        ow = w + 2 * layer.pad - layer.kernel + 1
        if oh < 1 or ow < 1:
            raise ConfigurationError("conv kernel larger than its input")
        return (layer.out_ch, oh, ow)
    if kind == "avgpool":
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ConfigurationError(f"avgpool needs an image of at least 2x2, got {shape}")
        c, h, w = shape
        return (c, h // 2, w // 2)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "linear":
        if shape != (layer.in_ch,):
            raise ConfigurationError(f"linear expects ({layer.in_ch},), got {shape}")
        return (layer.out_ch,)
    if kind == "channel_norm" and len(shape) != 3:
        raise ConfigurationError("channel_norm needs an image-shaped input")
    return shape


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    num_classes: int
    input_shape: tuple = (1, 28, 28)
    head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        for layer in self.layers:
            if layer.kind not in _LAYER_KINDS:
                raise ConfigurationError(f"unknown layer kind {layer.kind!r}")
        shapes = self.layer_shapes()
        if self.head and shapes[-1:] != [(self.num_classes,)]:
            raise ConfigurationError(f"network must end with {self.num_classes} logits")

    def layer_shapes(self, upto=None):
        """Per-sample output shape after each layer."""
        shape, out = self.input_shape, []
        for layer in self.layers[:upto]:
            shape = _out_shape(layer, shape)
            out.append(shape)
        return out

    def feature_spec(self) -> "NetworkSpec":
        """The network truncated before its final linear classifier."""
        if not self.layers or self.layers[-1].kind != "linear":
            raise ConfigurationError("network does not end with a linear classifier")
        return NetworkSpec(self.layers[:-1], self.num_classes, self.input_shape, head=False)

    @property
    def feature_dim(self) -> int:
        upto = len(self.layers) - 1 if self.head else len(self.layers)
        shapes = self.layer_shapes(upto)
        return int(np.prod(shapes[-1] if shapes else self.input_shape))

    def segments(self):
        segs, offset = [], 0
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                shapes = [("weight", (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel))]
            elif layer.kind == "linear":
                shapes = [("weight", (layer.out_ch, layer.in_ch))]
            else:
                continue
            shapes.append(("bias", (layer.out_ch,)))
            for name, shp in shapes:
                n = int(np.prod(shp))
                segs.append(Segment(i, name, offset, n, shp))
                offset += n
        return segs

    @property
    def num_params(self) -> int:
        return sum(s.length for s in self.segments())

    def to_dict(self):
        return {
            "layers": [l.to_dict() for l in self.layers],
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            [Layer(**l) for l in d["layers"]],
            int(d["num_classes"]),
            tuple(d["input_shape"]),
            bool(d.get("head", True)),
        )


def convnet(num_classes=10, input_shape=(1, 28, 28), width=16, depth=3) -> NetworkSpec:
    """The distribution-matching ConvNet family: ``depth`` x [conv-norm-relu-pool] + linear."""
    layers, c = [], input_shape[0]
    h, w = input_shape[1:]
    for _ in range(depth):
        layers += [conv(3, c, width), channel_norm(), relu(), avgpool()]
        c, h, w = width, h // 2, w // 2
    layers += [flatten(), linear(c * h * w, num_classes)]
    return NetworkSpec(layers, num_classes, input_shape)


def mlp(num_classes, input_shape, hidden=(32,)) -> NetworkSpec:
    layers, d = [flatten()], int(np.prod(input_shape))
    for width in hidden:
        layers += [linear(d, width), relu()]
        d = width
    layers.append(linear(d, num_classes))
    return NetworkSpec(layers, num_classes, input_shape)


@dataclass
class Model:
    spec: NetworkSpec
    params: np.ndarray
    seed: Optional[int] = None
    precision: str = "float64"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"unknown precision {self.precision!r}")
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.num_params,):
            raise DimensionError(
                f"parameter vector has length {self.params.size}, spec needs {self.spec.num_params}"
            )

    def copy(self) -> "Model":
        return Model(self.spec, self.params.copy(), self.seed, self.precision)

    def with_params(self, params) -> "Model":
        return Model(self.spec, np.array(params, dtype=np.float64), self.seed, self.precision)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def tensor(self, a, requires_grad=False) -> torch.Tensor:
        return as_tensor(a, requires_grad, self.dtype)

    def segment(self, layer: int, name: str) -> np.ndarray:
        for s in self.spec.segments():
            if (s.layer, s.name) == (layer, name):
                return self.params[s.offset : s.offset + s.length].reshape(s.shape)
        raise KeyError((layer, name))


def init_model(spec: NetworkSpec, seed: int, precision: str = "float64") -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    params = np.empty(spec.num_params)
    for seg in spec.segments():
        layer = spec.layers[seg.layer]
        fan_in = layer.in_ch * (layer.kernel**2 if layer.kind == "conv" else 1)
        bound = 1.0 / np.sqrt(fan_in)
        params[seg.offset : seg.offset + seg.length] = rng.uniform(-bound, bound, seg.length)
    return Model(spec, params, seed, precision)


# ---------------------------------------------------------------- forward


def check_batch(spec: NetworkSpec, batch) -> None:
    shape = tuple(batch.shape)
    if len(shape) != len(spec.input_shape) + 1 or shape[1:] != spec.input_shape:
        raise InputShapeError(f"batch shape {shape} does not match input {spec.input_shape}")


def apply_layers(spec: NetworkSpec, params: torch.Tensor, x: torch.Tensor, upto=None) -> torch.Tensor:
    """Differentiable forward through ``spec.layers[:upto]``."""
    segs = {(s.layer, s.name): s for s in spec.segments()}

    def piece(i, name):
        s = segs[(i, name)]
        return params[s.offset : s.offset + s.length].view(s.shape)

    for i, layer in enumerate(spec.layers[:upto]):
        kind = layer.kind
        if kind == "conv":
            x = F.conv2d(x, piece(i, "weight"), piece(i, "bias"), padding=layer.pad)
        elif kind == "linear":
            x = F.linear(x, piece(i, "weight"), piece(i, "bias"))
        elif kind == "channel_norm":
            x = F.instance_norm(x, eps=NORM_EPS)
        elif kind == "relu":
            x = F.relu(x)
        elif kind == "avgpool":
            x = F.avg_pool2d(x, 2)
        elif kind == "flatten":
            x = x.flatten(1)
    return x


def _feature_upto(spec):
    return len(spec.layers) - 1 if spec.head else len(spec.layers)


def forward(model: Model, batch, chunk: int = 1000) -> np.ndarray:
    """Logits for ``batch``."""
    check_batch(model.spec, batch)
    if len(batch) == 0:
        return np.zeros((0, model.spec.num_classes))
    p = model.tensor(model.params)
    with torch.no_grad():
        outs = [apply_layers(model.spec, p, model.tensor(batch[i : i + chunk])) for i in range(0, len(batch), chunk)]
    return torch.cat(outs).double().numpy()


def features(model: Model, batch, chunk: int = 1000) -> np.ndarray:
    """Penultimate representation: the input of the final linear layer, flattened."""
    check_batch(model.spec, batch)
    upto = _feature_upto(model.spec)
    p = model.tensor(model.params)
    with torch.no_grad():
        outs = [
            apply_layers(model.spec, p, model.tensor(batch[i : i + chunk]), upto).flatten(1)
            for i in range(0, len(batch), chunk)
        ]
    return torch.cat(outs).double().numpy()


def predict(model: Model, batch) -> np.ndarray:
    return forward(model, batch).argmax(axis=1)


def accuracy(model: Model, images, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(predict(model, images) == labels))


# ---------------------------------------------------------------- losses


def _labels(labels, n, k) -> torch.Tensor:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    return torch.as_tensor(labels.astype(np.int64))


def cross_entropy_t(logits: torch.Tensor, labels, reduction="mean") -> torch.Tensor:
    n, k = logits.shape
    return F.cross_entropy(logits, _labels(labels, n, k), reduction=reduction)


def cross_entropy(logits, labels, reduction="mean") -> float:
    """Mean (or summed) negative log-softmax probability of the true labels."""
    return float(cross_entropy_t(as_tensor(logits), labels, reduction))


def per_sample_loss(model: Model, images, labels) -> np.ndarray:
    logits = as_tensor(forward(model, images))
    return cross_entropy_t(logits, labels, "none").numpy()


def loss(model: Model, images, labels, reduction="mean") -> float:
    return cross_entropy(forward(model, images), labels, reduction)


# ---------------------------------------------------------------- derivatives


def grad_params(model: Model, images, labels, reduction="mean", chunk: int = 1000) -> np.ndarray:
    """Gradient of the cross-entropy with respect to the flat parameter vector."""
    check_batch(model.spec, images)
    n = len(images)
    if n == 0:
        raise ConfigurationError("empty batch")
    labels = np.asarray(labels)
    p = model.tensor(model.params, requires_grad=True)
    total = np.zeros(model.spec.num_params)
    for i in range(0, n, chunk):
        logits = apply_layers(model.spec, p, model.tensor(images[i : i + chunk]))
        out = cross_entropy_t(logits, labels[i : i + chunk], "sum")
        total += torch.autograd.grad(out, p)[0].double().numpy()
    return total / n if reduction == "mean" else total


def grad_input(model: Model, images, labels, reduction="mean") -> np.ndarray:
    """Gradient of the loss with respect to the input pixels."""
    check_batch(model.spec, images)
    x = model.tensor(images, requires_grad=True)
    out = cross_entropy_t(apply_layers(model.spec, model.tensor(model.params), x), labels, reduction)
    return torch.autograd.grad(out, x)[0].double().numpy()


def hvp(model: Model, images, labels, v, reduction="mean", chunk: int = 512) -> np.ndarray:
    """Exact Hessian-vector product (reverse-over-reverse)."""
    check_batch(model.spec, images)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != model.params.shape:
        raise DimensionError(f"vector length {v.size} != parameter count {model.params.size}")
    labels = np.asarray(labels)
    n = len(images)
    vt = model.tensor(v)
    total = np.zeros_like(v)
    for i in range(0, n, chunk):
        p = model.tensor(model.params, requires_grad=True)
        logits = apply_layers(model.spec, p, model.tensor(images[i : i + chunk]))
        out = cross_entropy_t(logits, labels[i : i + chunk], "sum")
        (g,) = torch.autograd.grad(out, p, create_graph=True)
        total += torch.autograd.grad(g @ vt, p)[0].double().numpy()
    return total / n if reduction == "mean" else total


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 50
    learning_rate: float = 0.05
    momentum: float = 0.0
    seed: int = 0
    record_ledger: bool = False
    batch_partition: str = "mixed"  # or "segregated"
    schedule: str = "constant"  # or "cosine" (per epoch, decays to zero)
    weight_decay: float = 0.0

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / self.epochs))
        return self.learning_rate

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative")
        if self.batch_partition not in ("mixed", "segregated"):
            raise ConfigurationError(f"unknown batch partition {self.batch_partition!r}")


def epoch_batches(rng, n, config: TrainConfig, tags=None):
    """Index batches for one epoch; segregated batches never mix tags."""
    if config.batch_partition == "mixed":
        perm = rng.permutation(n)
        return [perm[i : i + config.batch_size] for i in range(0, n, config.batch_size)]
    batches = []
    for tag in sorted(set(tags.tolist())):
        members = np.flatnonzero(tags == tag)
        members = members[rng.permutation(len(members))]
        batches += [members[i : i + config.batch_size] for i in range(0, len(members), config.batch_size)]
    return [batches[j] for j in rng.permutation(len(batches))]


def train(model: Model, dataset, config: TrainConfig):
    """Minibatch SGD (optional heavy-ball momentum).

    The parameters are always ``theta_initial + S`` with ``S`` the running sum
    of applied steps, so a recorded ledger telescopes to the final parameters
    exactly.

    Returns
    -------
    (Model, UpdateLedger or None)
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    ids = np.asarray(dataset.ids)
    n = len(labels)
    if n == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if config.batch_size > n:
        raise ConfigurationError("batch_size exceeds dataset size")
    tags = None
    if config.batch_partition == "segregated":
        if getattr(dataset, "tags", None) is None:
            raise ConfigurationError("segregated batches need per-sample tags")
        tags = np.asarray(dataset.tags)
    rng = np.random.default_rng(config.seed)
    theta0 = model.params.copy()
    applied = np.zeros_like(theta0)
    velocity = np.zeros_like(theta0)
    ledger = UpdateLedger(theta0.copy()) if config.record_ledger else None
    current = model.copy()
    for epoch in range(config.epochs):
        for b, idx in enumerate(epoch_batches(rng, n, config, tags)):
            g = grad_params(current, images[idx], labels[idx])
            if config.weight_decay:
                g = g + config.weight_decay * current.params
            velocity = config.momentum * velocity + g
            delta = -config.lr_at(epoch) * velocity
            applied = applied + delta
            current.params = theta0 + applied
            if ledger is not None:
                ledger.entries.append(LedgerEntry(epoch, b, tuple(sorted(int(i) for i in ids[idx])), delta))
    if ledger is not None:
        ledger.final = current.params.copy()
    return current, ledger


# ---------------------------------------------------------------- checkpoints


def save_model(model: Model, path: str) -> None:
    """Write ``path`` (little-endian float64 parameters) and ``path.meta`` (JSON)."""
    raw = model.params.astype("<f8")
    raw.tofile(path)
    meta = {
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "precision": model.precision,
        "num_params": int(raw.size),
        "sha256": hashlib.sha256(raw.tobytes()).hexdigest(),
    }
    with open(path + ".meta", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_model(path: str) -> Model:
    if not os.path.exists(path + ".meta"):
        raise FormatError(f"missing sidecar metadata {path}.meta")
    with open(path + ".meta") as fh:
        meta = json.load(fh)
    params = np.fromfile(path, dtype="<f8")
    if params.size != meta["num_params"]:
        raise FormatError(f"parameter file has {params.size} values, metadata says {meta['num_params']}")
    if hashlib.sha256(params.tobytes()).hexdigest() != meta["sha256"]:
        raise FormatError("parameter digest mismatch")
    return Model(
        NetworkSpec.from_dict(meta["spec"]), params.astype(np.float64), meta.get("seed"), meta.get("precision", "float64")
    )
