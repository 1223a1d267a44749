import gzip
import hashlib
import math
import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab import data
from unlearnlab.data import (
    AUG_OPS,
    DIGIT_AUG_WEIGHTS,
    AugmentationParams,
    KnowledgeView,
    LabeledDataset,
    TriggerSpec,
)
from unlearnlab.errors import ConfigurationError, DataEnvironmentError, FormatError

from conftest import HAVE_DATA, needs_data
from oracles import parse_idx


def small_dataset(rng, n=60, k=3, size=8):
    return LabeledDataset(rng.uniform(0, 1, (n, 1, size, size)), np.arange(n) % k, np.arange(n) * 10)


# ---------------------------------------------------------------- datasets


def test_dataset_invariants(rng):
    with pytest.raises(ConfigurationError):
        LabeledDataset(np.zeros((2, 1, 4, 4)), [0, 1], [5, 5])
    with pytest.raises(ConfigurationError):
        LabeledDataset(np.full((1, 1, 4, 4), 1.5), [0], [0])
    with pytest.raises(ConfigurationError):
        LabeledDataset(np.zeros((2, 1, 4, 4)), [0], [0, 1])


def test_select_and_drop(rng):
    ds = small_dataset(rng)
    sel = ds.select_ids([30, 10])
    assert sel.ids.tolist() == [30, 10]
    assert np.array_equal(sel.images[1], ds.images[1])
    assert len(ds.drop_ids([30, 10])) == len(ds) - 2
    with pytest.raises(ConfigurationError):
        ds.select_ids([7])


def test_digest_detects_pixel_change(rng):
    ds = small_dataset(rng)
    d = ds.digests()
    x = ds.images[0].copy()
    x[0, 0, 0] = np.nextafter(x[0, 0, 0], 2.0)
    assert data.sample_digest(x, ds.labels[0]) != d[0]
    assert data.sample_digest(ds.images[0], 1 - ds.labels[0]) != d[0]


# ---------------------------------------------------------------- IDX


def write_pair(tmp_path, images, labels):
    ip, lp = str(tmp_path / "img"), str(tmp_path / "lbl")
    data.write_idx(ip, images)
    data.write_idx(lp, labels)
    return ip, lp


def test_idx_round_trip(tmp_path, rng):
    images = rng.integers(0, 256, (5, 4, 3), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
    ip, lp = write_pair(tmp_path, images, labels)
    ds = data.load_idx(ip, lp, id_base=7)
    assert ds.images.shape == (5, 1, 4, 3)
    assert np.array_equal(ds.images[:, 0], images / 255.0)
    assert ds.ids.tolist() == [7, 8, 9, 10, 11]
    with open(ip, "rb") as fh:
        assert fh.read(4) == b"\x00\x00\x08\x03"


def test_idx_gzip(tmp_path, rng):
    images = rng.integers(0, 256, (3, 2, 2), dtype=np.uint8)
    ip, _ = write_pair(tmp_path, images, np.zeros(3, np.uint8))
    with open(ip, "rb") as src, gzip.open(ip + ".gz", "wb") as dst:
        dst.write(src.read())
    assert np.array_equal(data.read_idx(ip + ".gz"), images)


def test_idx_count_mismatch(tmp_path, rng):
    ip, lp = write_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(4, np.uint8))
    with pytest.raises(FormatError):
        data.load_idx(ip, lp)


@pytest.mark.parametrize("mutate", ["magic", "truncate", "header"])
def test_idx_malformed(tmp_path, mutate):
    ip, _ = write_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(3, np.uint8))
    raw = open(ip, "rb").read()
    raw = {"magic": b"\x01" + raw[1:], "truncate": raw[:-1], "header": raw[:6]}[mutate]
    open(ip, "wb").write(raw)
    with pytest.raises(FormatError):
        data.read_idx(ip)


@needs_data
def test_desk_mnist_against_independent_reader():
    root = os.path.join(os.environ["UNLEARN_DATA_DIR"], "mnist")
    dims, body = parse_idx(os.path.join(root, "train-images-idx3-ubyte"))
    ds = data.load_dataset("mnist", "train")
    assert [len(ds), ds.image_shape] == [dims[0], (1, dims[1], dims[2])]
    first = bytes(np.round(ds.images[0, 0] * 255).astype(np.uint8).tobytes())
    assert hashlib.sha256(first).hexdigest() == hashlib.sha256(body[: dims[1] * dims[2]]).hexdigest()
    test = data.load_dataset("mnist", "test")
    assert not set(ds.ids.tolist()) & set(test.ids.tolist())


def test_missing_data_dir(monkeypatch, tmp_path):
    monkeypatch.delenv(data.DATA_ENV, raising=False)
    with pytest.raises(DataEnvironmentError):
        data.load_dataset("mnist")
    with pytest.raises(DataEnvironmentError):
        data.load_dataset("mnist", root=str(tmp_path))


def test_manifest_round_trip(tmp_path):
    path = str(tmp_path / "m.txt")
    data.write_manifest([5, 1, 3], path)
    assert open(path).read() == "1\n3\n5\n"
    assert data.read_manifest(path) == [1, 3, 5]


# ---------------------------------------------------------------- knowledge subsets


def test_full_fraction_is_identity(rng):
    ds = small_dataset(rng)
    sub = data.knowledge_subset(KnowledgeView(ds, 1.0, 3))
    assert set(sub.ids.tolist()) == set(ds.ids.tolist())


def test_one_percent_of_sixty_thousand():
    labels = np.repeat(np.arange(10), 6000)
    counts = data.stratified_counts(labels, 0.01)
    assert sum(counts.values()) == 600
    assert all(abs(c - 60) <= 1 for c in counts.values())


def test_subset_deterministic_and_preserves_ids(rng):
    ds = small_dataset(rng, 90)
    a = data.knowledge_subset(KnowledgeView(ds, 0.3, 11))
    b = data.knowledge_subset(KnowledgeView(ds, 0.3, 11))
    assert a.ids.tolist() == b.ids.tolist()
    assert set(a.ids.tolist()) <= set(ds.ids.tolist())
    assert np.array_equal(a.images, ds.select_ids(a.ids).images)


def test_bad_fraction(rng):
    with pytest.raises(ConfigurationError):
        data.knowledge_subset(KnowledgeView(small_dataset(rng), 0.0))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=300), st.floats(0.001, 1.0))
def test_stratified_counts_property(labels, fraction):
    labels = np.array(labels)
    counts = data.stratified_counts(labels, fraction)
    assert sum(counts.values()) == int(round(fraction * len(labels)))
    for c, k in counts.items():
        n_c = int(np.sum(labels == c))
        assert abs(k - fraction * n_c) <= 1 and 0 <= k <= n_c


# ---------------------------------------------------------------- augmentation


def check_bounds(w):
    assert -15 <= w.angle <= 15 and 0.8 <= w.factor <= 1.2
    assert 0 <= w.pad <= 4 and w.sigma <= 0.05
    assert w.box[2] * w.box[3] <= 0.25 * 28 * 28


def test_draws_within_bounds():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        check_bounds(data.sample_augmentation(rng))


def test_invalid_params_rejected():
    for kw in ({"angle": 20.0}, {"factor": 1.3}, {"pad": 5}, {"sigma": 0.1}, {"box": (0, 0, 20, 20)}, {"op": "blur"}):
        with pytest.raises(ConfigurationError):
            AugmentationParams(**kw)


def test_draw_deterministic():
    a = data.sample_augmentation(np.random.default_rng(42))
    b = data.sample_augmentation(np.random.default_rng(42))
    assert a == b


def test_op_frequencies():
    rng = np.random.default_rng(1)
    ops = [data.sample_augmentation(rng).op for _ in range(100_000)]
    for op in AUG_OPS:
        assert abs(ops.count(op) / len(ops) - DIGIT_AUG_WEIGHTS[op]) < 0.03
    assert ops.count("flip") == 0


def test_identity_is_bitwise(rng):
    x = rng.uniform(0, 1, (3, 1, 28, 28))
    assert np.array_equal(data.augment(x, AugmentationParams()), x)


def test_zero_rotation(rng):
    x = rng.uniform(0, 1, (3, 1, 28, 28))
    assert np.abs(data.augment(x, AugmentationParams("rotate", angle=0.0)) - x).max() < 1e-12


@needs_data
def test_rotation_round_trip(mnist_train):
    x = mnist_train.images[:50]
    y = data.augment(data.augment(x, AugmentationParams("rotate", angle=10.0)), AugmentationParams("rotate", angle=-10.0))
    assert np.abs(y - x).mean() < 0.05


@pytest.mark.parametrize("seed", range(6))
def test_shape_and_range_preserved(rng, seed):
    w = data.sample_augmentation(np.random.default_rng(seed))
    x = rng.uniform(0, 1, (2, 1, 28, 28))
    y = data.augment(x, w)
    assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1


def test_siamese_pairing_on_coordinate_grids():
    """One draw moves pixels identically in two different batches."""
    ii, jj = np.meshgrid(np.arange(28), np.arange(28), indexing="ij")
    rows = (ii / 27.0)[None, None]
    cols = (jj / 27.0)[None, None]
    rng = np.random.default_rng(7)
    for _ in range(30):
        w = data.sample_augmentation(rng)
        if w.op in ("noise", "cutout", "identity"):
            continue
        r1 = data.augment(np.concatenate([rows, cols]), w)
        r2 = data.augment(np.concatenate([cols, rows]), w)
        assert np.array_equal(r1[0], r2[1]) and np.array_equal(r1[1], r2[0])
    # noise and cutout: the same mask / field is applied to every image
    w = AugmentationParams("noise", sigma=0.03, noise_seed=5)
    half = np.full((1, 1, 28, 28), 0.5)
    a, b = data.augment(half, w), data.augment(np.concatenate([half, half]), w)
    assert np.array_equal(a[0], b[1])


def test_augmentation_is_differentiable(rng):
    x = torch.as_tensor(rng.uniform(0.2, 0.8, (2, 1, 28, 28))).requires_grad_(True)
    for w in (AugmentationParams("rotate", angle=7.0), AugmentationParams("scale", factor=1.1),
              AugmentationParams("crop", pad=2, offset=(1, 3))):
        (g,) = torch.autograd.grad(data.augment_tensor(x, w).sum(), x)
        assert torch.isfinite(g).all() and g.abs().sum() > 0


# ---------------------------------------------------------------- triggers


def test_trigger_rate_zero(rng):
    ds = small_dataset(rng, 100, 10, 28)
    poisoned, ids = data.apply_trigger(ds, TriggerSpec(rate=0.0), 0)
    assert ids == set() and np.array_equal(poisoned.images, ds.images)


def test_trigger_count_and_stamp(rng):
    ds = small_dataset(rng, 1000, 10, 28)
    t = TriggerSpec()
    poisoned, ids = data.apply_trigger(ds, t, 3)
    assert len(ids) == 50
    sel = poisoned.select_ids(sorted(ids))
    assert np.all(sel.labels == t.target_label)
    assert np.array_equal(sel.images[:, :, 24:27, 24:27], np.broadcast_to(t.patch, (50, 1, 3, 3)))
    assert np.all(ds.select_ids(sorted(ids)).labels != t.target_label)
    untouched = poisoned.drop_ids(ids)
    assert np.array_equal(untouched.images, ds.drop_ids(ids).images)


def test_trigger_out_of_bounds(rng):
    ds = small_dataset(rng, 20, 2, 28)
    with pytest.raises(ConfigurationError):
        data.apply_trigger(ds, TriggerSpec(position=(26, 26)), 0)
