import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resfri.data import (
    ChannelStats, DataError, Dataset, batches, channel_stats, load_cifar10, load_cifar10_bin, load_mnist,
    load_mnist_idx, num_batches, preprocess, preprocess_batch, split_holdout, to_rgb32, write_cifar10_bin,
    write_mnist_idx,
)

OFFICIAL = Path(__file__).resolve().parents[1] / "data"


def write_idx(tmp_path, images, labels, gz=False):
    ip, lp = tmp_path / "img-idx3-ubyte", tmp_path / "lab-idx1-ubyte"
    write_mnist_idx(images, labels, ip, lp)
    if gz:
        for p in (ip, lp):
            p.with_suffix(".gz").write_bytes(gzip.compress(p.read_bytes()))
        return ip.with_suffix(".gz"), lp.with_suffix(".gz")
    return ip, lp


def small(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, 1, 28, 28)).astype(np.float32), rng.integers(0, 10, n))


class TestIdx:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, (7, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, 7, dtype=np.uint8)
        ds = load_mnist_idx(*write_idx(tmp_path, images, labels))
        np.testing.assert_array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), images)
        np.testing.assert_array_equal(ds.labels, labels)
        ip, lp = write_idx(tmp_path, images, labels)
        again = tmp_path / "again"
        again.mkdir()
        write_mnist_idx(np.round(ds.images[:, 0] * 255).astype(np.uint8), ds.labels, again / "i", again / "l")
        assert (again / "i").read_bytes() == ip.read_bytes()
        assert (again / "l").read_bytes() == lp.read_bytes()

    def test_gzip(self, tmp_path):
        images = np.zeros((2, 3, 3), np.uint8)
        ds = load_mnist_idx(*write_idx(tmp_path, images, [1, 2], gz=True))
        assert len(ds) == 2

    def test_pixel_255_is_one(self, tmp_path):
        ds = load_mnist_idx(*write_idx(tmp_path, np.full((1, 1, 1), 255, np.uint8), [3]))
        assert ds.images.item() == 1.0
        assert ds.labels.item() == 3

    def test_count_mismatch(self, tmp_path):
        with pytest.raises(DataError):
            load_mnist_idx(*write_idx(tmp_path, np.zeros((2, 2, 2), np.uint8), [1, 2, 3]))

    def test_bad_magic(self, tmp_path):
        ip, lp = write_idx(tmp_path, np.zeros((1, 2, 2), np.uint8), [0])
        raw = bytearray(ip.read_bytes())
        raw[3] = 0x01
        ip.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="magic"):
            load_mnist_idx(ip, lp)

    def test_truncated(self, tmp_path):
        ip, lp = write_idx(tmp_path, np.zeros((2, 2, 2), np.uint8), [0, 1])
        ip.write_bytes(ip.read_bytes()[:-1])
        with pytest.raises(DataError):
            load_mnist_idx(ip, lp)

    def test_header_magic_values(self, tmp_path):
        ip, lp = write_idx(tmp_path, np.zeros((1, 2, 2), np.uint8), [0])
        assert struct.unpack(">I", ip.read_bytes()[:4])[0] == 0x00000803
        assert struct.unpack(">I", lp.read_bytes()[:4])[0] == 0x00000801


class TestCifar:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        images = rng.integers(0, 256, (5, 3, 32, 32), dtype=np.uint8)
        labels = rng.integers(0, 10, 5)
        path = tmp_path / "b.bin"
        write_cifar10_bin(images, labels, path)
        ds = load_cifar10_bin([path])
        back = np.round(ds.images * 255).astype(np.uint8)
        np.testing.assert_array_equal(back, images)
        write_cifar10_bin(back, ds.labels, tmp_path / "c.bin")
        assert (tmp_path / "c.bin").read_bytes() == path.read_bytes()

    def test_black_record(self, tmp_path):
        path = tmp_path / "r.bin"
        path.write_bytes(bytes([3]) + bytes(3072))
        ds = load_cifar10_bin([path])
        assert ds.labels.tolist() == [3]
        assert ds.images.shape == (1, 3, 32, 32) and not ds.images.any()

    def test_channel_planar_layout(self, tmp_path):
        rec = np.zeros(3073, np.uint8)
        rec[1 + 1024 + 5] = 200
        path = tmp_path / "r.bin"
        path.write_bytes(rec.tobytes())
        ds = load_cifar10_bin([path])
        assert ds.images[0, 1, 0, 5] == np.float32(200 / 255)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.bin"
        path.write_bytes(bytes(3073 * 2 - 1))
        with pytest.raises(DataError):
            load_cifar10_bin([path])

    def test_bad_label(self, tmp_path):
        path = tmp_path / "l.bin"
        path.write_bytes(bytes([10]) + bytes(3072))
        with pytest.raises(DataError, match="label"):
            load_cifar10_bin([path])

    def test_multiple_files_concatenate(self, tmp_path):
        for i in range(2):
            write_cifar10_bin(np.zeros((3, 3072), np.uint8), [i] * 3, tmp_path / f"{i}.bin")
        ds = load_cifar10_bin([tmp_path / "0.bin", tmp_path / "1.bin"])
        assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]


@pytest.mark.skipif(not (OFFICIAL / "train-images-idx3-ubyte").exists() and
                    not (OFFICIAL / "train-images-idx3-ubyte.gz").exists(), reason="official MNIST not present")
def test_official_mnist_counts():
    assert len(load_mnist(OFFICIAL, "train")) == 60000
    assert len(load_mnist(OFFICIAL, "test")) == 10000


@pytest.mark.skipif(not (OFFICIAL / "cifar-10-batches-bin").is_dir(), reason="official CIFAR-10 not present")
def test_official_cifar_counts():
    assert len(load_cifar10(OFFICIAL, "train")) == 50000
    assert len(load_cifar10(OFFICIAL, "test")) == 10000


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path)


class TestPreprocess:
    def test_rgb32(self):
        x = np.ones((2, 1, 28, 28), np.float32)
        out = to_rgb32(x)
        assert out.shape == (2, 3, 32, 32)
        assert out[:, :, 2:30, 2:30].all() and out.sum() == 2 * 3 * 28 * 28

    def test_eval_deterministic(self):
        img = np.random.default_rng(2).random((3, 32, 32)).astype(np.float32)
        stats = ChannelStats([0.5] * 3, [0.2] * 3)
        np.testing.assert_array_equal(preprocess(img, "eval", stats), preprocess(img, "eval", stats))

    def test_normalize_with_image_mean(self):
        img = np.random.default_rng(3).random((3, 32, 32)).astype(np.float32)
        out = preprocess(img, "eval", ChannelStats(img.mean(axis=(1, 2)), [1, 1, 1]))
        assert np.abs(out.mean(axis=(1, 2))).max() < 1e-6

    def test_train_seeded_crops_repeat(self):
        imgs = np.random.default_rng(4).random((5, 3, 32, 32)).astype(np.float32)
        a = preprocess_batch(imgs, "train", None, np.random.default_rng(9))
        b = preprocess_batch(imgs, "train", None, np.random.default_rng(9))
        c = preprocess_batch(imgs, "train", None, np.random.default_rng(10))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_augmentation_keeps_shape_and_range(self, seed):
        imgs = np.random.default_rng(seed).random((3, 1, 28, 28)).astype(np.float32)
        out = preprocess_batch(imgs, "train", None, np.random.default_rng(seed), flip=False)
        assert out.shape == (3, 3, 32, 32)
        assert out.min() >= 0 and out.max() <= 1

    def test_train_without_flip_keeps_orientation(self):
        img = np.zeros((1, 3, 32, 32), np.float32)
        img[..., :16] = 1
        for s in range(20):
            out = preprocess_batch(img, "train", None, np.random.default_rng(s), flip=False)
            assert out[..., :12].sum() >= out[..., 20:].sum()

    def test_bad_stats(self):
        with pytest.raises(DataError):
            ChannelStats([0, 0, 0], [1, 0, 1])

    def test_bad_policy(self):
        with pytest.raises(ValueError):
            preprocess_batch(np.zeros((1, 3, 32, 32), np.float32), "test", None)

    def test_channel_stats(self):
        ds = small(20)
        s = channel_stats(ds)
        x = to_rgb32(ds.images).astype(np.float64)
        np.testing.assert_allclose(s.mean, x.mean(axis=(0, 2, 3)), rtol=1e-6)


class TestBatches:
    def test_sizes(self):
        assert [len(b.labels) for b in batches(small(10), 4, shuffle_seed=0)] == [4, 4, 2]
        assert num_batches(10, 4) == 3

    def test_seeded_order(self):
        ds = small(50)
        a = np.concatenate([b.indices for b in batches(ds, 8, shuffle_seed=1)])
        b = np.concatenate([b.indices for b in batches(ds, 8, shuffle_seed=1)])
        c = np.concatenate([b.indices for b in batches(ds, 8, shuffle_seed=2)])
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    @given(n=st.integers(1, 200), bs=st.integers(1, 64), seed=st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_epoch_covers_every_index_once(self, n, bs, seed):
        ds = Dataset(np.zeros((n, 1, 2, 2), np.float32), np.zeros(n, np.int64))
        idx = np.concatenate([b.indices for b in batches(ds, bs, shuffle_seed=seed)])
        assert sorted(idx.tolist()) == list(range(n))

    def test_labels_follow_indices(self):
        ds = small(30)
        for b in batches(ds, 7, shuffle_seed=3):
            np.testing.assert_array_equal(b.labels, ds.labels[b.indices])

    def test_resume_from_batch(self):
        ds = small(30)
        stats = channel_stats(ds)
        kw = dict(shuffle_seed=[1, 2], policy="train", stats=stats, flip=False, aug_seed=[1, 2])
        full = list(batches(ds, 8, **kw))
        tail = list(batches(ds, 8, start=2, **kw))
        assert len(tail) == 2
        for a, b in zip(full[2:], tail):
            np.testing.assert_array_equal(a.images.data, b.images.data)
            np.testing.assert_array_equal(a.indices, b.indices)

    def test_images_are_normalized_tensors(self):
        ds = small(8)
        b = next(batches(ds, 8, stats=channel_stats(ds)))
        assert b.images.shape == (8, 3, 32, 32) and b.images.dtype == np.float32
        assert np.isfinite(b.images.data).all()


class TestHoldout:
    def test_fraction(self):
        train, val = split_holdout(small(50), 0.1, 0)
        assert len(val) == 5 and len(train) == 45

    def test_disjoint_and_seeded(self):
        ds = Dataset(np.arange(40, dtype=np.float32).reshape(40, 1, 1, 1), np.zeros(40, np.int64))
        t1, v1 = split_holdout(ds, 0.25, 7)
        t2, v2 = split_holdout(ds, 0.25, 7)
        np.testing.assert_array_equal(v1.images, v2.images)
        assert not set(t1.images.ravel()) & set(v1.images.ravel())

    def test_degenerate(self):
        with pytest.raises(ValueError):
            split_holdout(small(5), 0.1, 0)
