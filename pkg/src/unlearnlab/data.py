"""Datasets: IDX ingestion, attacker-knowledge subsets, Siamese augmentation, trigger control."""
from __future__ import annotations

import gzip
import hashlib
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DataEnvironmentError, FormatError

DATA_ENV = "UNLEARN_DATA_DIR"

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}


@dataclass
class LabeledDataset:
    """Images ``(n, c, h, w)`` in [0, 1] with labels, unique integer ids and optional tags."""

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    tags: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = len(self.labels)
        if self.images.ndim != 4 or len(self.images) != n or len(self.ids) != n:
            raise ConfigurationError("images, labels and ids must have matching lengths")
        if len(np.unique(self.ids)) != n:
            raise ConfigurationError("sample ids must be unique")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ConfigurationError("pixel values must lie in [0, 1]")
        if self.tags is not None:
            self.tags = np.asarray(self.tags, dtype=object)
            if len(self.tags) != n:
                raise ConfigurationError("tags must have one entry per sample")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        tags = None if self.tags is None else self.tags[idx]
        return LabeledDataset(self.images[idx], self.labels[idx], self.ids[idx], tags, self.name)

    def select_ids(self, ids) -> "LabeledDataset":
        pos = {int(i): k for k, i in enumerate(self.ids)}
        try:
            return self.subset([pos[int(i)] for i in ids])
        except KeyError as exc:
            raise ConfigurationError(f"unknown sample id {exc.args[0]}") from None

    def drop_ids(self, ids) -> "LabeledDataset":
        ids = set(int(i) for i in ids)
        return self.subset([k for k, i in enumerate(self.ids) if int(i) not in ids])

    def with_tag(self, tag: str) -> "LabeledDataset":
        return LabeledDataset(self.images, self.labels, self.ids, np.full(len(self), tag, dtype=object), self.name)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def digests(self) -> dict:
        """sha256 of every sample's (pixels, label), keyed by id."""
        return {int(i): sample_digest(x, y) for i, x, y in zip(self.ids, self.images, self.labels)}


def sample_digest(image, label) -> str:
    h = hashlib.sha256(np.ascontiguousarray(image, dtype="<f8").tobytes())
    h.update(struct.pack("<q", int(label)))
    return h.hexdigest()


def concat(*parts: LabeledDataset) -> LabeledDataset:
    parts = [p for p in parts if len(p)]
    if any(p.tags is None for p in parts):
        tags = None
    else:
        tags = np.concatenate([p.tags for p in parts])
    return LabeledDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.ids for p in parts]),
        tags,
        parts[0].name if parts else "",
    )


# ---------------------------------------------------------------- IDX files


def read_idx(path: str) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed)."""
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0 or buf[2] not in _IDX_DTYPES:
        raise FormatError(f"{path}: bad IDX magic number")
    dtype = np.dtype(_IDX_DTYPES[buf[2]])
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims)) if dims else 1
    if len(buf) - header != count * dtype.itemsize:
        raise FormatError(f"{path}: payload holds {len(buf) - header} bytes, header implies {count * dtype.itemsize}")
    return np.frombuffer(buf, dtype, count, header).reshape(dims)


def write_idx(path: str, array) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype not in _IDX_CODES:
        raise FormatError(f"unsupported IDX dtype {array.dtype}")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, _IDX_CODES[array.dtype], array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(image_path: str, label_path: str, id_base: int = 0, name: str = "") -> LabeledDataset:
    """Load an image/label IDX pair as a dataset with pixels scaled to [0, 1]."""
    images = read_idx(image_path)
    labels = read_idx(label_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError("expected a rank-3 image file and a rank-1 label file")
    if len(images) != len(labels):
        raise FormatError(f"image count {len(images)} != label count {len(labels)}")
    pixels = images.astype(np.float64)[:, None] / 255.0
    return LabeledDataset(pixels, labels.astype(np.int64), id_base + np.arange(len(labels)), name=name)


def data_dir() -> str:
    root = os.environ.get(DATA_ENV)
    if not root:
        raise DataEnvironmentError(f"set {DATA_ENV} to the dataset root")
    return root


# test ids never collide with train ids of the same dataset
TEST_ID_OFFSET = 1_000_000
DATASET_ID_STRIDE = 10_000_000
_DATASET_SLOTS = {"mnist": 0, "fmnist": 1, "digits": 2}


def load_dataset(name: str, split: str = "train", root: Optional[str] = None) -> LabeledDataset:
    """Load ``<root>/<name>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]``."""
    root = root or data_dir()
    kind = {"train": "train", "test": "t10k"}[split]
    base = os.path.join(root, name)
    paths = []
    for part in ("images-idx3", "labels-idx1"):
        stem = os.path.join(base, f"{kind}-{part}-ubyte")
        found = [p for p in (stem, stem + ".gz") if os.path.exists(p)]
        if not found:
            raise DataEnvironmentError(f"missing dataset file {stem}")
        paths.append(found[0])
    id_base = _DATASET_SLOTS.get(name, 9) * DATASET_ID_STRIDE + (TEST_ID_OFFSET if split == "test" else 0)
    return load_idx(*paths, id_base=id_base, name=name)


def write_manifest(ids, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(str(i) for i in sorted(int(i) for i in ids)) + "\n")


def read_manifest(path: str) -> list:
    with open(path) as fh:
        return [int(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- knowledge subsets


@dataclass(frozen=True)
class KnowledgeView:
    source: LabeledDataset = field(repr=False)
    fraction: float
    seed: int = 0


def stratified_counts(labels, fraction: float) -> dict:
    """Per-class sample counts summing to round(fraction * n), each within 1 of fraction * n_c."""
    classes, sizes = np.unique(labels, return_counts=True)
    exact = fraction * sizes
    counts = np.floor(exact).astype(int)
    short = int(round(fraction * len(labels))) - counts.sum()
    order = sorted(range(len(classes)), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[: max(short, 0)]:
        counts[k] += 1
    return {int(c): int(k) for c, k in zip(classes, counts)}


def knowledge_subset(view: KnowledgeView) -> LabeledDataset:
    """Class-stratified random subset holding ``fraction`` of the source."""
    if not 0.0 < view.fraction <= 1.0:
        raise ConfigurationError("fraction must lie in (0, 1]")
    src = view.source
    if view.fraction == 1.0:
        return src.subset(np.arange(len(src)))
    rng = np.random.default_rng(view.seed)
    chosen = []
    for c, k in stratified_counts(src.labels, view.fraction).items():
        members = src.class_indices(c)
        chosen.extend(np.sort(rng.choice(members, k, replace=False)))
    return src.subset(np.sort(np.asarray(chosen, dtype=np.int64)))


# ---------------------------------------------------------------- augmentation

AUG_OPS = ("identity", "crop", "rotate", "scale", "flip", "noise", "cutout")

DIGIT_AUG_WEIGHTS = {
    "identity": 0.10,
    "crop": 0.25,
    "rotate": 0.20,
    "scale": 0.20,
    "flip": 0.0,
    "noise": 0.10,
    "cutout": 0.15,
}

MAX_ANGLE = 15.0
SCALE_RANGE = (0.8, 1.2)
MAX_PAD = 4
MAX_SIGMA = 0.05
MAX_CUTOUT_AREA = 0.25


@dataclass(frozen=True)
class AugmentationParams:
    """One draw ``w`` from the augmentation distribution.

    ``box`` is ``(top, left, height, width)`` relative to an ``image_size``
    canvas; ``offset`` is the crop window origin inside the padded image.
    """

    op: str = "identity"
    pad: int = 0
    offset: tuple = (0, 0)
    angle: float = 0.0
    factor: float = 1.0
    sigma: float = 0.0
    noise_seed: int = 0
    box: tuple = (0, 0, 0, 0)
    image_size: tuple = (28, 28)

    def __post_init__(self):
        if self.op not in AUG_OPS:
            raise ConfigurationError(f"unknown augmentation {self.op!r}")
        if not -MAX_ANGLE <= self.angle <= MAX_ANGLE:
            raise ConfigurationError("rotation angle out of bounds")
        if not SCALE_RANGE[0] <= self.factor <= SCALE_RANGE[1]:
            raise ConfigurationError("scale factor out of bounds")
        if not 0 <= self.pad <= MAX_PAD or not all(0 <= o <= 2 * self.pad for o in self.offset):
            raise ConfigurationError("crop padding/offset out of bounds")
        if not 0.0 <= self.sigma <= MAX_SIGMA:
            raise ConfigurationError("noise sigma out of bounds")
        h, w = self.image_size
        if self.box[2] * self.box[3] > MAX_CUTOUT_AREA * h * w:
            raise ConfigurationError("cutout box larger than a quarter of the image")


def sample_augmentation(rng: np.random.Generator, weights=None, image_size=(28, 28)) -> AugmentationParams:
    """Draw an operation by categorical weight, then its parameters uniformly within bounds."""
    weights = dict(DIGIT_AUG_WEIGHTS if weights is None else weights)
    ops = [o for o in AUG_OPS if weights.get(o, 0.0) > 0]
    p = np.array([weights[o] for o in ops], dtype=np.float64)
    op = ops[rng.choice(len(ops), p=p / p.sum())]
    h, w = image_size
    if op == "crop":
        pad = int(rng.integers(1, MAX_PAD + 1))
        offset = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
        return AugmentationParams(op, pad=pad, offset=offset, image_size=image_size)
    if op == "rotate":
        return AugmentationParams(op, angle=float(rng.uniform(-MAX_ANGLE, MAX_ANGLE)), image_size=image_size)
    if op == "scale":
        return AugmentationParams(op, factor=float(rng.uniform(*SCALE_RANGE)), image_size=image_size)
    if op == "noise":
        return AugmentationParams(
            op, sigma=float(rng.uniform(0.0, MAX_SIGMA)), noise_seed=int(rng.integers(2**31)), image_size=image_size
        )
    if op == "cutout":
        bh, bw = int(rng.integers(1, h // 2 + 1)), int(rng.integers(1, w // 2 + 1))
        top, left = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
        return AugmentationParams(op, box=(top, left, bh, bw), image_size=image_size)
    return AugmentationParams(op, image_size=image_size)


def _affine(x: torch.Tensor, theta) -> torch.Tensor:
    theta = torch.as_tensor(np.asarray(theta, dtype=np.float64)).to(x.dtype).expand(x.shape[0], 2, 3)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def augment_tensor(x: torch.Tensor, w: AugmentationParams) -> torch.Tensor:
    """Differentiable version of :func:`augment` on an ``(n, c, h, w)`` tensor."""
    if w.op == "identity":
        return x
    h, wd = x.shape[-2:]
    if w.op == "crop":
        padded = F.pad(x, (w.pad,) * 4)
        out = padded[..., w.offset[0] : w.offset[0] + h, w.offset[1] : w.offset[1] + wd]
    elif w.op == "rotate":
        a = math.radians(w.angle)
        out = _affine(x, [[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0]])
    elif w.op == "scale":
        out = _affine(x, [[1.0 / w.factor, 0.0, 0.0], [0.0, 1.0 / w.factor, 0.0]])
    elif w.op == "flip":
        out = x.flip(-1)
    elif w.op == "noise":
        noise = np.random.default_rng(w.noise_seed).normal(0.0, w.sigma, tuple(x.shape[1:]))
        out = x + torch.as_tensor(noise).to(x.dtype)
    else:
        top, left, bh, bw = w.box
        mask = torch.ones(tuple(x.shape[-2:]), dtype=x.dtype)
        mask[top : top + bh, left : left + bw] = 0.0
        out = x * mask
    return out.clamp(0.0, 1.0)


def augment(batch, w: AugmentationParams) -> np.ndarray:
    """Apply one augmentation draw to every image of ``batch`` (shape preserved, clamped to [0, 1])."""
    batch = np.asarray(batch, dtype=np.float64)
    if w.op == "identity":
        return batch
    with torch.no_grad():
        return augment_tensor(torch.as_tensor(batch), w).numpy()


# ---------------------------------------------------------------- trigger control


def checkerboard_patch(size: int = 3, channels: int = 1) -> np.ndarray:
    board = (np.indices((size, size)).sum(axis=0) % 2 == 0).astype(np.float64)
    return np.repeat(board[None], channels, axis=0)


@dataclass(frozen=True)
class TriggerSpec:
    patch: np.ndarray = field(default_factory=checkerboard_patch)
    position: tuple = (24, 24)
    target_label: int = 0
    rate: float = 0.05


def stamp(images, t: TriggerSpec) -> np.ndarray:
    patch = np.asarray(t.patch, dtype=np.float64)
    if patch.ndim == 2:
        patch = patch[None]
    out = np.array(images, dtype=np.float64)
    top, left = t.position
    ph, pw = patch.shape[-2:]
    if top < 0 or left < 0 or top + ph > out.shape[-2] or left + pw > out.shape[-1]:
        raise ConfigurationError("trigger patch does not fit inside the image")
    out[:, :, top : top + ph, left : left + pw] = patch
    return out


def apply_trigger(dataset: LabeledDataset, t: TriggerSpec, seed: int):
    """Stamp the patch on round(rate * n) non-target samples and relabel them.

    Returns the poisoned dataset and the set of affected ids.
    """
    if not 0.0 <= t.rate <= 1.0:
        raise ConfigurationError("trigger rate must lie in [0, 1]")
    stamp(dataset.images[:1], t)  # bounds check
    n_poison = int(round(t.rate * len(dataset)))
    candidates = np.flatnonzero(dataset.labels != t.target_label)
    if n_poison > len(candidates):
        raise ConfigurationError("not enough non-target samples to poison")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(candidates, n_poison, replace=False))
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    if n_poison:
        images[chosen] = stamp(images[chosen], t)
        labels[chosen] = t.target_label
    poisoned = LabeledDataset(images, labels, dataset.ids.copy(), dataset.tags, dataset.name)
    return poisoned, set(int(i) for i in dataset.ids[chosen])
