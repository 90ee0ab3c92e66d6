import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dar_forge import data
from dar_forge.errors import ParseError, RejectedInputError


def idx_bytes(dims, payload, code=0x08):
    return struct.pack(">HBB", 0, code, len(dims)) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def cifar_record(label, fill):
    return bytes([label]) + bytes([fill]) * 3072


def test_parse_idx_example():
    t = data.parse_idx(idx_bytes((1, 2, 2), [0, 255, 128, 64]))
    assert t.shape == (1, 2, 2) and t.dtype == np.float32
    np.testing.assert_allclose(t[0], [[0.0, 1.0], [128 / 255, 64 / 255]], rtol=0, atol=1e-7)
    assert t[0, 1, 0] == pytest.approx(0.50196, abs=1e-5)
    assert t[0, 1, 1] == pytest.approx(0.25098, abs=1e-5)


def test_parse_idx_labels_magic():
    assert data.parse_idx_raw(idx_bytes((3,), [7, 0, 9])).tolist() == [7, 0, 9]


def test_parse_idx_empty_stream():
    with pytest.raises(ParseError) as err:
        data.parse_idx(b"")
    assert err.value.offset == 0


def test_parse_idx_length_mismatch_names_counts():
    with pytest.raises(ParseError, match="expected 4 bytes, got 3"):
        data.parse_idx(idx_bytes((2, 2), [1, 2, 3]))


@pytest.mark.parametrize("blob", [b"\x01\x00\x08\x01", b"\x00\x00\x0d\x01", b"\x00\x00\x08\x00"])
def test_parse_idx_bad_magic(blob):
    with pytest.raises(ParseError):
        data.parse_idx(blob + b"\x00\x00\x00\x00")


def test_cifar_single_white_record():
    ds = data.parse_cifar10_batch(cifar_record(7, 255))
    assert len(ds) == 1 and ds.labels == [7]
    assert ds.images[0].shape == (3, 32, 32)
    assert (ds.images[0] == 1.0).all()
    assert ds.class_names[7] == "horse"


def test_cifar_planar_layout():
    rec = bytearray(cifar_record(1, 0))
    rec[1 + 1024 + 5] = 255  # green plane, row 0, col 5
    img = data.parse_cifar10_batch(bytes(rec)).images[0]
    assert img[1, 0, 5] == 1.0 and img.sum() == 1.0


def test_cifar_two_records():
    assert len(data.parse_cifar10_batch(cifar_record(0, 1) + cifar_record(9, 2))) == 2


def test_cifar_label_out_of_range():
    with pytest.raises(ParseError, match="label 10"):
        data.parse_cifar10_batch(cifar_record(3, 0) + cifar_record(10, 0))


def test_cifar_bad_length():
    with pytest.raises(ParseError):
        data.parse_cifar10_batch(cifar_record(3, 0)[:-1])


def toy_dataset(n_per_class=5, classes=10):
    images = [np.full((1, 2, 2), i / 100, np.float32) for i in range(n_per_class * classes)]
    labels = [i % classes for i in range(n_per_class * classes)]
    return data.LabeledDataset(images, labels)


def test_subset_full_size_is_permutation():
    ds = toy_dataset()
    idx = data.subset_indices(ds.labels, len(ds), seed=3)
    assert sorted(idx) == list(range(len(ds)))


def test_subset_deterministic():
    ds = toy_dataset()
    assert data.subset_indices(ds.labels, 17, 5) == data.subset_indices(ds.labels, 17, 5)


def test_subset_stratified_one_per_class():
    ds = toy_dataset()
    sub = data.select_subset(ds, 10, seed=11)
    assert sorted(sub.labels) == list(range(10))


def test_subset_too_large():
    with pytest.raises(RejectedInputError):
        data.select_subset(toy_dataset(), 51, 0)


def test_ppm_white_pixel_bytes():
    assert data.write_ppm(np.ones((3, 1, 1), np.float32)) == b"P6\n1 1\n255\n\xff\xff\xff"


def test_ppm_half_rounds_away_from_zero():
    assert data.quantize(np.array([0.5]))[0] == 128
    assert data.quantize(np.array([1.5 / 255]))[0] == 2


def test_ppm_read_with_comment():
    t = data.read_ppm(b"P6\n# made by hand\n2 1\n255\n\x00\x80\xff\x10\x20\x30")
    assert t.shape == (3, 1, 2)
    assert t[2, 0, 0] == 1.0 and t[0, 0, 1] == pytest.approx(16 / 255)


@pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n\x00\x00\x00", b"P6\n1 1\n65535\n" + b"\x00" * 6,
                                  b"P6\n1 1\n255\n\x00", b"P6", b""])
def test_ppm_rejects(blob):
    with pytest.raises(ParseError):
        data.read_ppm(blob)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_ppm_round_trip_bound(h, w, seed):
    x = np.random.default_rng(seed).random((3, h, w), dtype=np.float32)
    back = data.read_ppm(data.write_ppm(x))
    assert np.abs(back - x).max() <= 1 / 510 + 1e-7
    assert data.write_ppm(back) == data.write_ppm(x)


def test_channel_conversion_exact_for_grey():
    g = np.random.default_rng(0).random((1, 3, 3), dtype=np.float32)
    assert data.to_channels(data.to_channels(g, 3), 1).tobytes() == g.tobytes()


def test_bundled_mnist(mnist_train, mnist_test):
    assert len(mnist_train) == 4000 and len(mnist_test) == 1000
    assert mnist_train.images[0].shape == (1, 28, 28)
    assert np.bincount(mnist_test.labels).tolist() == [100] * 10
    assert 0.0 <= min(im.min() for im in mnist_test.images) and max(im.max() for im in mnist_test.images) <= 1.0


def test_pad_and_pool_geometry(mnist_test):
    small = data.pad_and_pool(mnist_test.take([0, 1]), 2, 2)
    assert small.images[0].shape == (1, 16, 16)
