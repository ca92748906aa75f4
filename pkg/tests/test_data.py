"""Dataset loading, the canonical container, augmentation, and batching."""

import struct

import numpy as np
import pytest

from rescaps.data import (
    CAPS_MAGIC,
    DATASETS,
    DataFormatError,
    batch_iter,
    center_crop,
    load_canonical,
    load_canonical_bytes,
    load_dataset,
    load_idx,
    prepare_batch,
    random_brightness,
    random_crop,
    random_hflip,
    save_canonical,
    save_canonical_bytes,
    standardize,
)
from rescaps.synth import make_digits, make_idx_data_dir, write_idx_images, write_idx_labels


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_idx_data_dir(root, n_train=64, n_test=32, seed=0)
    return root


# -- idx ------------------------------------------------------------------------


def test_idx_roundtrip(synth_dir):
    images, labels = load_idx(
        synth_dir / "mnist" / "train-images-idx3-ubyte",
        synth_dir / "mnist" / "train-labels-idx1-ubyte",
    )
    assert images.shape == (64, 28, 28, 1)
    assert images.dtype == np.uint8
    assert labels.shape == (64,)
    assert labels.min() >= 0 and labels.max() < 10


def test_idx_bad_magic(tmp_path):
    img = tmp_path / "img"
    lab = tmp_path / "lab"
    img.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 28, 28) + b"\x00" * 784)
    lab.write_bytes(struct.pack(">II", 0x00000801, 1) + b"\x00")
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(img, lab)


def test_idx_truncated_names_byte_offset(tmp_path):
    img = tmp_path / "img"
    lab = tmp_path / "lab"
    img.write_bytes(struct.pack(">IIII", 0x00000803, 2, 28, 28) + b"\x00" * 100)
    lab.write_bytes(struct.pack(">II", 0x00000801, 2) + b"\x00\x01")
    with pytest.raises(DataFormatError, match="byte offset"):
        load_idx(img, lab)


def test_idx_count_mismatch(tmp_path):
    images, labels = make_digits(4, seed=1)
    write_idx_images(tmp_path / "img", images)
    write_idx_labels(tmp_path / "lab", labels[:3])
    with pytest.raises(DataFormatError, match="images but"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_gzip_transparent(synth_dir, tmp_path):
    import gzip
    import shutil

    src = synth_dir / "mnist" / "train-images-idx3-ubyte"
    gz = tmp_path / "train-images-idx3-ubyte.gz"
    with open(src, "rb") as f_in, gzip.open(gz, "wb") as f_out:
        shutil.copyfileobj(f_in, f_out)
    lab = synth_dir / "mnist" / "train-labels-idx1-ubyte"
    images, _ = load_idx(gz, lab)
    ref, _ = load_idx(src, lab)
    np.testing.assert_array_equal(images, ref)


# -- canonical container ------------------------------------------------------------


@pytest.mark.parametrize(
    "array",
    [
        np.random.default_rng(0).integers(0, 256, size=(5, 4, 4, 3)).astype(np.uint8),
        np.random.default_rng(1).normal(size=(7, 2)).astype(np.float32),
        np.arange(6, dtype=np.uint8),
    ],
)
def test_canonical_roundtrip_bit_exact(array, tmp_path):
    path = tmp_path / "t.caps"
    save_canonical(path, array)
    back = load_canonical(path)
    assert back.dtype == array.dtype
    assert back.shape == array.shape
    assert save_canonical_bytes(back) == save_canonical_bytes(array)
    np.testing.assert_array_equal(back, array)


def test_canonical_rejects_bad_magic():
    with pytest.raises(DataFormatError, match="magic"):
        load_canonical_bytes(b"NOPE" + b"\x00" * 16)


def test_canonical_rejects_unknown_version_and_dtype():
    good = save_canonical_bytes(np.zeros(3, dtype=np.uint8))
    bad_version = CAPS_MAGIC + struct.pack("<IBB", 9, 0, 1) + good[10:]
    with pytest.raises(DataFormatError, match="version"):
        load_canonical_bytes(bad_version)
    bad_dtype = CAPS_MAGIC + struct.pack("<IBB", 1, 7, 1) + good[10:]
    with pytest.raises(DataFormatError, match="dtype"):
        load_canonical_bytes(bad_dtype)


def test_canonical_rejects_length_mismatch():
    blob = save_canonical_bytes(np.zeros((2, 3), dtype=np.uint8))
    with pytest.raises(DataFormatError, match="payload"):
        load_canonical_bytes(blob[:-2])


def test_canonical_rejects_unsupported_dtype():
    with pytest.raises(DataFormatError):
        save_canonical_bytes(np.zeros(3, dtype=np.int32))


# -- crops -----------------------------------------------------------------------


def test_random_crop_offsets_cover_the_valid_range():
    rng = np.random.default_rng(2)
    base = np.zeros((400, 28, 28, 1), dtype=np.float32)
    base[:, :, :, 0] = np.arange(28)[None, :, None] * 28 + np.arange(28)[None, None, :]
    out = random_crop(base, 24, rng)
    assert out.shape == (400, 24, 24, 1)
    offsets = set()
    for img in out:
        top_left = int(img[0, 0, 0])
        offsets.add((top_left // 28, top_left % 28))
    assert offsets == {(y, x) for y in range(5) for x in range(5)}


def test_random_crop_is_identity_at_exact_size():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 24, 24, 1)).astype(np.float32)
    np.testing.assert_array_equal(random_crop(x, 24, rng), x)


def test_random_crop_offsets_for_svhn_shape():
    rng = np.random.default_rng(4)
    base = np.zeros((200, 32, 32, 3), dtype=np.float32)
    base[:, :, :, 0] = np.arange(32)[None, :, None] * 32 + np.arange(32)[None, None, :]
    out = random_crop(base, 24, rng)
    tl = out[:, 0, 0, 0].astype(int)
    assert ((tl // 32) <= 8).all() and ((tl % 32) <= 8).all()


def test_random_crop_rejects_small_images():
    with pytest.raises(DataFormatError):
        random_crop(np.zeros((1, 20, 20, 1), dtype=np.float32), 24, np.random.default_rng(0))


def test_center_crop_offsets():
    x = np.zeros((1, 28, 28, 1), dtype=np.float32)
    x[0, 2, 2, 0] = 1.0
    assert center_crop(x, 24)[0, 0, 0, 0] == 1.0  # offset (2, 2)

    x32 = np.zeros((1, 32, 32, 3), dtype=np.float32)
    x32[0, 4, 4, :] = 1.0
    assert (center_crop(x32, 24)[0, 0, 0] == 1.0).all()  # offset (4, 4)

    y = np.random.default_rng(5).normal(size=(1, 24, 24, 1)).astype(np.float32)
    np.testing.assert_array_equal(center_crop(y, 24), y)


# -- brightness / flip ----------------------------------------------------------------


def test_brightness_shifts_whole_image_within_range():
    rng = np.random.default_rng(6)
    x = np.full((100, 8, 8, 1), 0.5, dtype=np.float32)
    out = random_brightness(x, rng)
    deltas = out - 0.5
    # one scalar per image
    assert np.allclose(deltas, deltas[:, :1, :1, :1], atol=1e-7)
    d = deltas[:, 0, 0, 0]
    assert (d >= -0.25).all() and (d < 0.25).all()
    assert len(np.unique(np.round(d, 6))) > 10


def test_brightness_clamps_saturated_images():
    rng = np.random.default_rng(7)
    ones = np.ones((100, 4, 4, 1), dtype=np.float32)
    out = random_brightness(ones, rng)
    assert (out <= 1.0).all()
    rng2 = np.random.default_rng(7)
    deltas = rng2.uniform(-0.25, 0.25, size=(100, 1, 1, 1)).astype(np.float32)
    positive = deltas[:, 0, 0, 0] > 0
    np.testing.assert_array_equal(out[positive], 1.0)


def test_hflip_matches_manual_mask_and_is_involutive():
    rng = np.random.default_rng(8)
    x = np.random.default_rng(9).uniform(size=(50, 6, 6, 1)).astype(np.float32)
    out = random_hflip(x, rng)
    mask = np.random.default_rng(8).random(50) < 0.5
    expected = x.copy()
    expected[mask] = expected[mask, :, ::-1, :]
    np.testing.assert_array_equal(out, expected)
    # flipping the flipped images with the same mask restores the originals
    restored = out.copy()
    restored[mask] = restored[mask, :, ::-1, :]
    np.testing.assert_array_equal(restored, x)


def test_hflip_leaves_symmetric_images_unchanged():
    rng = np.random.default_rng(10)
    sym = np.zeros((20, 4, 4, 1), dtype=np.float32)
    sym[:, :, 1:3, 0] = 1.0
    np.testing.assert_array_equal(random_hflip(sym, rng), sym)


def test_hflip_mirrors_marker_columns():
    x = np.zeros((1, 2, 2, 1), dtype=np.float32)
    x[0, :, 0, 0] = 1.0  # left column lit
    rng = np.random.default_rng(12)  # first draw < 0.5 flips
    flipped = None
    for seed in range(20):
        rng = np.random.default_rng(seed)
        if np.random.default_rng(seed).random(1)[0] < 0.5:
            flipped = random_hflip(x, rng)
            break
    assert flipped is not None
    np.testing.assert_array_equal(flipped[0, :, 1, 0], 1.0)
    np.testing.assert_array_equal(flipped[0, :, 0, 0], 0.0)


# -- standardize ------------------------------------------------------------------------


def test_standardize_moments():
    rng = np.random.default_rng(11)
    x = rng.uniform(size=(30, 24, 24, 3)).astype(np.float32)
    out = standardize(x)
    means = out.mean(axis=(1, 2, 3))
    stds = out.std(axis=(1, 2, 3))
    assert (np.abs(means) < 1e-5).all()
    assert (np.abs(stds - 1.0) < 1e-4).all()


def test_standardize_constant_image_is_zero():
    x = np.full((2, 4, 4, 1), 0.7, dtype=np.float32)
    np.testing.assert_array_equal(standardize(x), 0.0)


def test_standardize_two_pixel_closed_form():
    x = np.array([0.0, 1.0], dtype=np.float32).reshape(1, 1, 2, 1)
    np.testing.assert_allclose(standardize(x).reshape(-1), [-1.0, 1.0], atol=1e-6)


# -- pipeline order -----------------------------------------------------------------------


def test_eval_path_is_scale_center_crop_standardize():
    rng = np.random.default_rng(13)
    images = rng.integers(0, 256, size=(3, 28, 28, 1)).astype(np.uint8)
    x, target = prepare_batch(images, DATASETS["mnist"], train=False)
    expected_target = center_crop(images.astype(np.float32) / 255.0, 24)
    np.testing.assert_allclose(target, expected_target, atol=1e-7)
    np.testing.assert_allclose(x, standardize(expected_target), atol=1e-6)
    assert (target >= 0).all() and (target <= 1).all()


def test_train_path_target_is_prestandardize_crop():
    rng = np.random.default_rng(14)
    images = rng.integers(0, 256, size=(5, 28, 28, 1)).astype(np.uint8)
    x, target = prepare_batch(images, DATASETS["mnist"], train=True, rng=np.random.default_rng(3))
    assert x.shape == (5, 24, 24, 1) and target.shape == (5, 24, 24, 1)
    assert (target >= 0).all() and (target <= 1).all()
    np.testing.assert_allclose(x, standardize(target), atol=1e-6)


# -- batching -------------------------------------------------------------------------------


def test_batch_iter_counts_and_short_final_batch():
    batches = list(batch_iter(60000, 128, np.random.default_rng(0)))
    assert len(batches) == 469
    assert len(batches[-1]) == 96
    assert all(len(b) == 128 for b in batches[:-1])


def test_batch_iter_deterministic_and_a_permutation():
    a = np.concatenate(list(batch_iter(1000, 128, np.random.default_rng(42))))
    b = np.concatenate(list(batch_iter(1000, 128, np.random.default_rng(42))))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(np.sort(a), np.arange(1000))
    c = np.concatenate(list(batch_iter(1000, 128, np.random.default_rng(43))))
    assert not np.array_equal(a, c)


# -- load_dataset --------------------------------------------------------------------------


def test_load_dataset_idx_layout(synth_dir):
    ds = load_dataset("mnist", synth_dir, "train")
    assert len(ds) == 64 and ds.classes == 10
    limited = load_dataset("mnist", synth_dir, "train", limit=10)
    assert len(limited) == 10
    np.testing.assert_array_equal(limited.images, ds.images[:10])


def test_load_dataset_caps_layout(tmp_path):
    rng = np.random.default_rng(15)
    base = tmp_path / "svhn"
    base.mkdir()
    images = rng.integers(0, 256, size=(12, 32, 32, 3)).astype(np.uint8)
    labels = rng.integers(0, 10, size=12).astype(np.uint8)
    save_canonical(base / "train-images.caps", images)
    save_canonical(base / "train-labels.caps", labels)
    ds = load_dataset("svhn", tmp_path, "train")
    assert ds.images.shape == (12, 32, 32, 3)
    np.testing.assert_array_equal(ds.labels, labels)


def test_load_dataset_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset("mnist", tmp_path, "train")


def test_load_dataset_wrong_shape_rejected(tmp_path):
    base = tmp_path / "norb"
    base.mkdir()
    save_canonical(base / "train-images.caps", np.zeros((3, 10, 10, 1), dtype=np.uint8))
    save_canonical(base / "train-labels.caps", np.zeros(3, dtype=np.uint8))
    with pytest.raises(DataFormatError, match="expected"):
        load_dataset("norb", tmp_path, "train")
