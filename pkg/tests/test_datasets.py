"""Datasets, the tensor file format, PGM grids, and the probe classifier."""

import math
import struct
import zlib

import numpy as np
import pytest

from asvae import datasets as ds
from asvae.errors import (
    BadMagicError,
    ChecksumError,
    ContractError,
    FormatError,
    ShapeError,
    TrainingError,
    TruncationError,
    VersionError,
)
from asvae.rng import RngStream

ATNS_F64_GOLDEN = (
    "41544e5301010203000000000000000200000000000000000000000000f03f00000000"
    "0000e0bf00000000000002400000000000001040000000000000c03f00000000000020"
    "c080d9517b"
)
ATNS_U8_GOLDEN = "41544e53010202020000000000000002000000000000000080ff0741b97af4"


# ---------------------------------------------------------------------------
# Dataset contract
# ---------------------------------------------------------------------------


def test_dataset_contract_rejects_bad_shapes_and_scale():
    with pytest.raises(ShapeError):
        ds.Dataset(name="x", features=np.zeros(4))
    with pytest.raises(ContractError):
        ds.Dataset(name="x", features=np.zeros((2, 2)), scale="celsius")
    with pytest.raises(ShapeError):
        ds.Dataset(name="x", features=np.zeros((2, 2)), labels=np.zeros(3, dtype=int))


# ---------------------------------------------------------------------------
# Gaussian ring mixture
# ---------------------------------------------------------------------------


def test_mixture_components_sit_on_the_ring():
    n, k, sep = 12000, 8, 4.0
    data = ds.gen_mixture2d(k, sep, n, seed=3)
    assert data.features.shape == (n, 2)
    assert data.labels.shape == (n,)
    counts = np.bincount(data.labels, minlength=k)
    assert counts.max() - counts.min() <= 1
    comp_std = math.sqrt(0.05 * sep)
    for j in range(k):
        pts = data.features[data.labels == j]
        center = sep * np.array([np.cos(2 * np.pi * j / k), np.sin(2 * np.pi * j / k)])
        bound = 5 * comp_std / math.sqrt(len(pts))
        assert np.all(np.abs(pts.mean(axis=0) - center) < bound), f"component {j}"
        assert np.all(np.abs(pts.std(axis=0) - comp_std) < 0.1 * comp_std)


def test_mixture_single_component_is_one_gaussian():
    data = ds.gen_mixture2d(1, 2.0, 4000, seed=9)
    np.testing.assert_allclose(data.features.mean(axis=0), [2.0, 0.0], atol=0.05)
    assert set(np.unique(data.labels)) == {0}


def test_mixture_is_deterministic_and_validates():
    a = ds.gen_mixture2d(3, 1.0, 50, seed=4)
    b = ds.gen_mixture2d(3, 1.0, 50, seed=4)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    for bad in [(0, 1.0, 10), (3, 0.0, 10), (3, 1.0, 0)]:
        with pytest.raises(ContractError):
            ds.gen_mixture2d(*bad, seed=0)


# ---------------------------------------------------------------------------
# Toy digits
# ---------------------------------------------------------------------------


def test_digit_templates_are_ten_distinct_binary_glyphs():
    t = ds.digit_templates()
    assert t.shape == (10, 64)
    assert set(np.unique(t)) <= {0.0, 1.0}
    assert len({row.tobytes() for row in t}) == 10
    assert np.all(t.sum(axis=1) > 0)


def test_digits_flip_noise_matches_the_rate():
    n = 2000
    data = ds.gen_toy_digits(n, seed=11)
    assert data.scale == "unit"
    assert set(np.unique(data.features)) <= {0.0, 1.0}
    counts = np.bincount(data.labels, minlength=10)
    assert counts.max() - counts.min() <= 1
    base = ds.digit_templates()[data.labels]
    flip_frac = np.mean(np.abs(data.features - base))
    se = math.sqrt(0.05 * 0.95 / (n * 64))
    assert abs(flip_frac - 0.05) < 5 * se


def test_digits_contract_and_determinism():
    a = ds.gen_toy_digits(30, seed=2)
    b = ds.gen_toy_digits(30, seed=2)
    np.testing.assert_array_equal(a.features, b.features)
    with pytest.raises(ContractError):
        ds.gen_toy_digits(0, seed=2)
    with pytest.raises(ContractError):
        ds.gen_toy_digits(10, seed=2, flip_rate=0.5)


# ---------------------------------------------------------------------------
# Tensor files
# ---------------------------------------------------------------------------


def test_tensor_file_golden_bytes():
    arr = np.array([[1.0, -0.5], [2.25, 4.0], [0.125, -8.0]])
    assert ds.tensor_file_bytes(arr).hex() == ATNS_F64_GOLDEN
    u = np.array([[0, 128], [255, 7]], dtype=np.uint8)
    assert ds.tensor_file_bytes(u).hex() == ATNS_U8_GOLDEN


def test_tensor_file_round_trips_both_dtypes(tmp_path):
    f = np.linspace(-3, 3, 24).reshape(2, 3, 4)
    ds.save_tensor_file(tmp_path / "a.atns", f)
    back = ds.load_tensor_file(tmp_path / "a.atns")
    np.testing.assert_array_equal(back, f)
    assert back.dtype == np.float64

    u = RngStream(5).integers(100, 256).astype(np.uint8).reshape(10, 10)
    ds.save_tensor_file(tmp_path / "b.atns", u)
    back_u = ds.load_tensor_file(tmp_path / "b.atns")
    np.testing.assert_array_equal(back_u, u)
    assert back_u.dtype == np.uint8


def test_tensor_file_rejects_unsupported_arrays():
    with pytest.raises(ContractError):
        ds.tensor_file_bytes(np.zeros((2, 2), dtype=np.int32))
    with pytest.raises(ContractError):
        ds.tensor_file_bytes(np.array(3.0))
    with pytest.raises(ContractError):
        ds.tensor_file_bytes(np.zeros((0, 2)))


def test_tensor_file_distinct_parse_failures():
    blob = ds.tensor_file_bytes(np.ones((2, 2)))
    with pytest.raises(BadMagicError):
        ds.parse_tensor_file(b"XTNS" + blob[4:])
    with pytest.raises(VersionError):
        ds.parse_tensor_file(blob[:4] + b"\x07" + blob[5:])
    bad_dtype = bytearray(blob)
    bad_dtype[5] = 9
    with pytest.raises(FormatError):
        ds.parse_tensor_file(bytes(bad_dtype))
    flipped = bytearray(blob)
    flipped[10] ^= 0xFF
    with pytest.raises(ChecksumError):
        ds.parse_tensor_file(bytes(flipped))


def test_tensor_file_truncation_at_every_length():
    blob = ds.tensor_file_bytes(np.ones((2, 3)))
    for n in range(len(blob)):
        with pytest.raises(FormatError):
            ds.parse_tensor_file(blob[:n])


def test_tensor_file_fuzz_never_escapes_format_errors():
    rng = np.random.default_rng(7)
    blob = ds.tensor_file_bytes(np.ones((2, 3)))
    for _ in range(300):
        mutated = bytearray(blob)
        for _ in range(int(rng.integers(1, 5))):
            mutated[int(rng.integers(0, len(mutated)))] = int(rng.integers(0, 256))
        try:
            out = ds.parse_tensor_file(bytes(mutated))
            assert isinstance(out, np.ndarray)  # identical or benign mutation
        except FormatError:
            pass


def reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_tensor_file_crafted_bodies_with_valid_crc():
    head = b"ATNS" + struct.pack("<BBB", 1, 1, 1)
    with pytest.raises(FormatError, match="zero-sized"):
        ds.parse_tensor_file(reseal(head + struct.pack("<Q", 0)))
    with pytest.raises(TruncationError):
        ds.parse_tensor_file(reseal(head + struct.pack("<Q", 1 << 58)))
    with pytest.raises(TruncationError):
        ds.parse_tensor_file(reseal(head))
    good = head + struct.pack("<Q", 1) + struct.pack("<d", 2.5)
    with pytest.raises(FormatError, match="trailing"):
        ds.parse_tensor_file(reseal(good + b"\x00"))


def test_dataset_file_wrapping(tmp_path):
    raw = np.array([[1.0, 2.0], [3.0, 4.0]])
    ds.save_tensor_file(tmp_path / "points.atns", raw)
    data = ds.load_dataset_file(tmp_path / "points.atns")
    assert data.name == "points"
    assert data.scale == "raw"
    np.testing.assert_array_equal(data.features, raw)
    assert data.pixels is None

    pix = np.array([[0, 255], [128, 1]], dtype=np.uint8)
    ds.save_tensor_file(tmp_path / "img.atns", pix)
    img = ds.load_dataset_file(tmp_path / "img.atns")
    assert img.scale == "unit"
    np.testing.assert_allclose(img.features, (pix + 0.5) / 256.0)
    np.testing.assert_array_equal(img.pixels, pix)

    ds.save_tensor_file(tmp_path / "deep.atns", np.zeros((2, 2, 2)))
    with pytest.raises(ContractError):
        ds.load_dataset_file(tmp_path / "deep.atns")


# ---------------------------------------------------------------------------
# PGM grids
# ---------------------------------------------------------------------------


def test_pgm_grid_exact_bytes(tmp_path):
    images = np.array([[0.0, 1.0, 0.5, 0.25], [1.0, 0.0, 0.0, 1.0]])
    path = tmp_path / "grid.pgm"
    ds.write_image_grid(path, images, cols=2)
    expected = b"P5\n5 2\n255\n" + bytes(
        [0, 255, 128, 255, 0, 128, 64, 128, 0, 255]
    )
    assert path.read_bytes() == expected


def test_pgm_grid_pads_unused_cells_with_gray(tmp_path):
    images = np.tile(np.linspace(0, 1, 4), (3, 1))
    path = tmp_path / "grid.pgm"
    ds.write_image_grid(path, images, cols=2)
    blob = path.read_bytes()
    header, payload = blob.split(b"255\n", 1)
    assert header == b"P5\n5 5\n"
    canvas = np.frombuffer(payload, dtype=np.uint8).reshape(5, 5)
    assert np.all(canvas[3:, 3:] == 128)


def test_pgm_grid_clips_out_of_range_values(tmp_path):
    images = np.array([[-1.0, 2.0, 0.0, 1.0]])
    ds.write_image_grid(tmp_path / "g.pgm", images, cols=1)
    payload = (tmp_path / "g.pgm").read_bytes().split(b"255\n", 1)[1]
    assert list(payload) == [0, 255, 0, 255]


def test_pgm_grid_shape_contracts(tmp_path):
    with pytest.raises(ContractError, match="not square"):
        ds.write_image_grid(tmp_path / "g.pgm", np.zeros((1, 6)), cols=1)
    ds.write_image_grid(tmp_path / "g.pgm", np.zeros((1, 6)), cols=1, height=2, width=3)
    with pytest.raises(ShapeError):
        ds.write_image_grid(tmp_path / "g.pgm", np.zeros((1, 6)), cols=1, height=2, width=2)
    with pytest.raises(ContractError):
        ds.write_image_grid(tmp_path / "g.pgm", np.zeros((1, 4)), cols=0)
    with pytest.raises(ShapeError):
        ds.write_image_grid(tmp_path / "g.pgm", np.zeros(4), cols=1)


# ---------------------------------------------------------------------------
# Probe classifier
# ---------------------------------------------------------------------------


def test_classifier_learns_digits_to_target_accuracy():
    data = ds.gen_toy_digits(1500, seed=21)
    clf = ds.train_toy_classifier(data, seed=99)
    fresh = ds.gen_toy_digits(500, seed=22)
    assert clf.n_classes == 10
    assert clf.accuracy(fresh.features, fresh.labels) >= 0.9
    probs = clf.predict_proba(fresh.features[:32])
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert probs.min() >= 0.0


def test_classifier_requires_labels_and_reports_stalls():
    unlabeled = ds.Dataset(name="u", features=np.zeros((8, 3)))
    with pytest.raises(ContractError):
        ds.train_toy_classifier(unlabeled)
    data = ds.gen_toy_digits(200, seed=5)
    with pytest.raises(TrainingError, match="stalled"):
        ds.train_toy_classifier(data, max_epochs=1, target_accuracy=1.01)
