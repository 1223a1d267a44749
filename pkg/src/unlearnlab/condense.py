"""Distribution-matching condensation of an informative synthetic set."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import nn
from .data import DIGIT_AUG_WEIGHTS, LabeledDataset, augment_tensor, sample_augmentation
from .errors import ConfigurationError, DimensionError, FormatError


def embed(net: nn.Model, batch) -> np.ndarray:
    """Rows of ``batch`` mapped through a feature extractor (a head-less spec)."""
    nn.check_batch(net.spec, np.asarray(batch))
    return nn.features(net, np.asarray(batch, dtype=np.float64))


def mmd_sq(real_embeds, syn_embeds) -> float:
    """Squared distance between the two empirical mean embeddings."""
    real_embeds = np.atleast_2d(np.asarray(real_embeds, dtype=np.float64))
    syn_embeds = np.atleast_2d(np.asarray(syn_embeds, dtype=np.float64))
    if real_embeds.shape[1] != syn_embeds.shape[1]:
        raise DimensionError(f"embedding widths differ: {real_embeds.shape[1]} vs {syn_embeds.shape[1]}")
    if len(real_embeds) == 0 or len(syn_embeds) == 0:
        raise DimensionError("mmd_sq needs non-empty embedding sets")
    diff = real_embeds.mean(axis=0) - syn_embeds.mean(axis=0)
    return float(diff @ diff)


def _mmd_sq_t(real: torch.Tensor, syn: torch.Tensor) -> torch.Tensor:
    diff = real.mean(dim=0) - syn.mean(dim=0)
    return (diff * diff).sum()


@dataclass(frozen=True)
class CondenseConfig:
    ipc: int = 10
    iterations: int = 200
    image_lr: float = 1.0
    real_batch: int = 64
    syn_batch: Optional[int] = None  # None: all ipc images of the class
    width: int = 16
    depth: int = 3
    augmentation: bool = True
    aug_weights: dict = field(default_factory=lambda: dict(DIGIT_AUG_WEIGHTS))
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.ipc < 1 or self.iterations < 0 or self.real_batch < 1:
            raise ConfigurationError("ipc and real_batch must be positive, iterations non-negative")
        if self.image_lr <= 0:
            raise ConfigurationError("image_lr must be positive")
        if self.syn_batch is not None and not 1 <= self.syn_batch <= self.ipc:
            raise ConfigurationError("syn_batch must lie in [1, ipc]")

    def embed_spec(self, num_classes, input_shape) -> nn.NetworkSpec:
        return nn.convnet(num_classes, tuple(input_shape), self.width, self.depth).feature_spec()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class SyntheticSet:
    images: np.ndarray
    labels: np.ndarray
    config: CondenseConfig
    history: list = field(default_factory=list)  # per-iteration class-averaged mmd_sq

    @property
    def ipc(self) -> int:
        return self.config.ipc

    def to_dataset(self, id_base: int, tag: str = "informative", name: str = "synthetic") -> LabeledDataset:
        n = len(self.labels)
        return LabeledDataset(
            self.images, self.labels, id_base + np.arange(n), np.full(n, tag, dtype=object), name
        )


def initial_images(real: LabeledDataset, ipc: int, classes, rng) -> np.ndarray:
    """``ipc`` real images per class drawn without replacement.

    A class with fewer than ``ipc`` real images contributes all of them and the
    remaining slots start as uniform noise (duplicates would receive identical
    updates and never separate).
    """
    blocks = []
    for c in classes:
        members = real.class_indices(c)
        take = min(ipc, len(members))
        block = [real.images[np.sort(rng.choice(members, take, replace=False))]]
        if take < ipc:
            block.append(rng.uniform(0.0, 1.0, (ipc - take,) + real.image_shape))
        blocks.append(np.concatenate(block))
    return np.concatenate(blocks)


def condense(real: LabeledDataset, config: CondenseConfig, num_classes: Optional[int] = None, probe=None) -> SyntheticSet:
    """Minimize mean-embedding discrepancy between real and synthetic batches per class.

    Each outer iteration draws a fresh random embedding network; each class
    draws one augmentation applied to both its real batch and its synthetic
    images, and takes one projected gradient step on the synthetic pixels.

    ``probe`` (optional callable ``(iteration, images) -> None``) is invoked
    after every iteration, for monitoring.
    """
    num_classes = num_classes or real.num_classes
    classes = list(range(num_classes))
    for c in classes:
        if len(real.class_indices(c)) < config.real_batch:
            raise ConfigurationError(f"class {c} has fewer than real_batch={config.real_batch} samples")
    rng = np.random.default_rng(config.seed)
    spec = config.embed_spec(num_classes, real.image_shape)
    images = initial_images(real, config.ipc, classes, rng)
    labels = np.repeat(np.arange(num_classes), config.ipc)
    dtype = nn.PRECISIONS[config.precision]
    history = []
    syn = torch.as_tensor(images)
    for it in range(config.iterations):
        net = nn.init_model(spec, int(rng.integers(2**63)), config.precision)
        params = net.tensor(net.params)
        losses = []
        for c in classes:
            members = real.class_indices(c)
            batch = real.images[np.sort(rng.choice(members, config.real_batch, replace=False))]
            rows = slice(c * config.ipc, (c + 1) * config.ipc)
            if config.syn_batch is not None:
                pick = np.sort(rng.choice(config.ipc, config.syn_batch, replace=False)) + c * config.ipc
            else:
                pick = np.arange(rows.start, rows.stop)
            w = sample_augmentation(rng, config.aug_weights, real.image_shape[1:]) if config.augmentation else None
            x_real = torch.as_tensor(batch).to(dtype)
            x_syn = syn[pick].to(dtype).requires_grad_(True)
            if w is not None:
                x_real, x_syn_aug = augment_tensor(x_real, w), augment_tensor(x_syn, w)
            else:
                x_syn_aug = x_syn
            with torch.no_grad():
                e_real = nn.apply_layers(spec, params, x_real)
            e_syn = nn.apply_layers(spec, params, x_syn_aug)
            loss = _mmd_sq_t(e_real, e_syn)
            (g,) = torch.autograd.grad(loss, x_syn)
            syn[pick] = (syn[pick] - config.image_lr * g.double()).clamp(0.0, 1.0)
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
        if probe is not None:
            probe(it, syn.numpy())
    return SyntheticSet(syn.numpy().copy(), labels, config, history)


# ---------------------------------------------------------------- utility check


@dataclass(frozen=True)
class UtilityResult:
    synthetic: float  # test accuracy of a classifier fit on the synthetic set
    real: float  # same protocol on ipc random real images per class

    @property
    def margin(self) -> float:
        return self.synthetic - self.real


def random_real_baseline(real: LabeledDataset, ipc: int, seed: int) -> LabeledDataset:
    rng = np.random.default_rng([seed, 3])
    idx = [np.sort(rng.choice(real.class_indices(c), ipc, replace=False)) for c in range(real.num_classes)]
    return real.subset(np.concatenate(idx))


def paired_utility(syn: SyntheticSet, real: LabeledDataset, test: LabeledDataset, seed: int,
                   epochs: int = 300, learning_rate: float = 0.01, momentum: float = 0.9,
                   precision: str = "float32") -> UtilityResult:
    """Fit the same fresh ConvNet on ``syn`` and on a random real set of equal size.

    The small sets are fit to convergence (heavy-ball SGD, many epochs) so the
    comparison measures the data rather than the optimizer budget.
    """
    spec = nn.convnet(real.num_classes, real.image_shape, syn.config.width, syn.config.depth)
    cfg = nn.TrainConfig(epochs=epochs, batch_size=50, learning_rate=learning_rate, momentum=momentum, seed=seed)

    def fit(ds):
        model, _ = nn.train(nn.init_model(spec, seed, precision), ds, cfg)
        return nn.accuracy(model, test.images, test.labels)

    return UtilityResult(fit(syn.to_dataset(0)), fit(random_real_baseline(real, syn.ipc, seed)))


# ---------------------------------------------------------------- persistence

_MAGIC = b"USYNSET1"


def save_synthetic(s: SyntheticSet, path: str) -> None:
    """Header (magic, metadata length), JSON metadata, then little-endian float64 pixels and int64 labels."""
    meta = {
        "ipc": s.ipc,
        "classes": int(s.labels.max()) + 1 if len(s.labels) else 0,
        "seed": s.config.seed,
        "config": s.config.to_dict(),
        "config_digest": s.config.digest(),
        "shape": list(s.images.shape),
        "pixel_sha256": hashlib.sha256(s.images.astype("<f8").tobytes()).hexdigest(),
        "history": s.history,
    }
    text = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<Q", len(text)) + text)
        fh.write(s.images.astype("<f8").tobytes())
        fh.write(s.labels.astype("<i8").tobytes())


def load_synthetic(path: str) -> SyntheticSet:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _MAGIC or len(buf) < 16:
        raise FormatError(f"{path}: not a synthetic-set file")
    (mlen,) = struct.unpack("<Q", buf[8:16])
    try:
        meta = json.loads(buf[16 : 16 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata") from exc
    shape = tuple(meta["shape"])
    npix = int(np.prod(shape))
    body = buf[16 + mlen :]
    if len(body) != 8 * npix + 8 * shape[0]:
        raise FormatError(f"{path}: payload size does not match metadata")
    images = np.frombuffer(body[: 8 * npix], "<f8").reshape(shape).astype(np.float64)
    labels = np.frombuffer(body[8 * npix :], "<i8").astype(np.int64)
    if hashlib.sha256(images.astype("<f8").tobytes()).hexdigest() != meta["pixel_sha256"]:
        raise FormatError(f"{path}: pixel digest mismatch")
    return SyntheticSet(images, labels, CondenseConfig(**meta["config"]), list(meta["history"]))
