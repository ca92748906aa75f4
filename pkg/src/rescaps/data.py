"""Dataset loading, augmentation, normalization, and batching.

Two on-disk formats are understood:

  * IDX, the big-endian format MNIST and Fashion-MNIST ship in (magic
    0x00000803 for image files, 0x00000801 for label files). Gzipped files
    are read transparently.
  * The canonical tensor container used for converted datasets (SVHN,
    Small-NORB) and for checkpoint parameters: magic "CAPS", u32-LE
    version (=1), u8 dtype code (0=u8, 1=f32 LE), u8 rank, rank u32-LE
    dims, then the row-major payload.

The augmentation order is fixed: scale to [0,1] -> brightness/flip ->
crop -> per-image standardization. Evaluation uses scale -> center crop ->
standardize. Brightness runs before standardization on purpose, so the
standardization guarantee holds on augmented pixels too. The pre-standardize
[0,1] crop is kept alongside the network input because it is the
reconstruction target.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CROP_SIZE = 24
BRIGHTNESS_RANGE = (-0.25, 0.25)
FLIP_PROBABILITY = 0.5
STD_FLOOR = 1e-6

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CAPS_MAGIC = b"CAPS"
CAPS_VERSION = 1
_CAPS_DTYPES = {0: np.dtype(np.uint8), 1: np.dtype("<f4")}
_CAPS_CODES = {np.dtype(np.uint8): 0, np.dtype("<f4"): 1}


class DataFormatError(ValueError):
    """A dataset file does not match its declared format."""


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    height: int
    width: int
    channels: int
    classes: int
    container: str          # "idx" | "caps"
    brightness: bool = False
    hflip: bool = False


DATASETS = {
    "mnist": DatasetSpec("mnist", 28, 28, 1, 10, "idx"),
    "fashion": DatasetSpec("fashion", 28, 28, 1, 10, "idx", hflip=True),
    "svhn": DatasetSpec("svhn", 32, 32, 3, 10, "caps", brightness=True),
    "norb": DatasetSpec("norb", 28, 28, 1, 5, "caps", brightness=True),
}

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CAPS_FILES = {
    "train": ("train-images.caps", "train-labels.caps"),
    "test": ("test-images.caps", "test-labels.caps"),
}


@dataclass
class Dataset:
    images: np.ndarray      # (N, H, W, C) uint8
    labels: np.ndarray      # (N,) int64 in [0, classes)
    split: str
    classes: int

    def __len__(self):
        return len(self.images)


# -- IDX -----------------------------------------------------------------------


def _open_maybe_gzip(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n, path, what):
    data = f.read(n)
    if len(data) != n:
        offset = f.tell() - len(data)
        raise DataFormatError(f"{path}: truncated while reading {what} at byte offset {offset}")
    return data


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair into (images u8 NxHxWx1, labels)."""
    with _open_maybe_gzip(images_path) as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        payload = _read_exact(f, n * rows * cols, images_path, f"{n}x{rows}x{cols} pixels")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols, 1)

    with _open_maybe_gzip(labels_path) as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, labels_path, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        labels = np.frombuffer(
            _read_exact(f, n_labels, labels_path, f"{n_labels} labels"), dtype=np.uint8
        ).astype(np.int64)

    if n != n_labels:
        raise DataFormatError(f"{images_path}: {n} images but {labels_path}: {n_labels} labels")
    return images, labels


# -- canonical container ---------------------------------------------------------


def save_canonical_bytes(array) -> bytes:
    array = np.ascontiguousarray(array)
    if array.dtype == np.uint8:
        code = 0
    elif array.dtype in (np.float32, np.dtype("<f4")):
        code = 1
        array = array.astype("<f4", copy=False)
    else:
        raise DataFormatError(f"canonical container supports u8/f32, not {array.dtype}")
    header = CAPS_MAGIC + struct.pack("<IBB", CAPS_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.tobytes()


def load_canonical_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != CAPS_MAGIC:
        raise DataFormatError(f"bad canonical magic {blob[:4]!r}, expected {CAPS_MAGIC!r}")
    version, code, rank = struct.unpack("<IBB", blob[4:10])
    if version != CAPS_VERSION:
        raise DataFormatError(f"unsupported canonical version {version}")
    if code not in _CAPS_DTYPES:
        raise DataFormatError(f"unknown canonical dtype code {code}")
    dims = struct.unpack(f"<{rank}I", blob[10 : 10 + 4 * rank])
    dtype = _CAPS_DTYPES[code]
    payload = blob[10 + 4 * rank :]
    expected = int(np.prod(dims)) * dtype.itemsize if rank else dtype.itemsize
    if len(payload) != expected:
        raise DataFormatError(
            f"canonical payload is {len(payload)} bytes, header declares {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save_canonical(path, array):
    Path(path).write_bytes(save_canonical_bytes(array))


def load_canonical(path):
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    try:
        return load_canonical_bytes(blob)
    except DataFormatError as e:
        raise DataFormatError(f"{path}: {e}") from None


# -- dataset registry --------------------------------------------------------------


def load_dataset(name, data_dir, split, limit=None) -> Dataset:
    """Load one split of a registered dataset from data_dir/<name>/.

    limit keeps only the first N samples (the deterministic desk-scale
    subsets). IDX paths fall back to their .gz twins when present.
    """
    if name not in DATASETS:
        raise DataFormatError(f"unknown dataset {name!r}")
    spec = DATASETS[name]
    base = Path(data_dir) / name
    if spec.container == "idx":
        img_name, lab_name = IDX_FILES[split]
        img_path, lab_path = base / img_name, base / lab_name
        if not img_path.exists() and img_path.with_suffix(img_path.suffix + ".gz").exists():
            img_path = img_path.with_suffix(img_path.suffix + ".gz")
        if not lab_path.exists() and lab_path.with_suffix(lab_path.suffix + ".gz").exists():
            lab_path = lab_path.with_suffix(lab_path.suffix + ".gz")
        for p in (img_path, lab_path):
            if not p.exists():
                raise FileNotFoundError(f"dataset file missing: {p}")
        images, labels = load_idx(img_path, lab_path)
    else:
        img_name, lab_name = CAPS_FILES[split]
        for p in (base / img_name, base / lab_name):
            if not p.exists():
                raise FileNotFoundError(f"dataset file missing: {p}")
        images = load_canonical(base / img_name)
        labels = load_canonical(base / lab_name).astype(np.int64)
        if images.ndim == 3:
            images = images[..., None]

    if images.shape[1:] != (spec.height, spec.width, spec.channels):
        raise DataFormatError(
            f"{name}/{split}: images are {images.shape[1:]}, expected "
            f"{(spec.height, spec.width, spec.channels)}"
        )
    if len(images) != len(labels):
        raise DataFormatError(f"{name}/{split}: {len(images)} images vs {len(labels)} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.classes):
        raise DataFormatError(f"{name}/{split}: labels outside [0, {spec.classes})")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images, labels, split, spec.classes)


# -- augmentation -----------------------------------------------------------------


def random_crop(images, size, rng):
    """Uniform contiguous window per image; images (B, H, W, C)."""
    B, H, W, _ = images.shape
    if H < size or W < size:
        raise DataFormatError(f"cannot crop {size}x{size} from {H}x{W}")
    oy = rng.integers(0, H - size + 1, size=B)
    ox = rng.integers(0, W - size + 1, size=B)
    rows = oy[:, None, None] + np.arange(size)[None, :, None]
    cols = ox[:, None, None] + np.arange(size)[None, None, :]
    return images[np.arange(B)[:, None, None], rows, cols, :]


def center_crop(images, size):
    B, H, W, _ = images.shape
    if H < size or W < size:
        raise DataFormatError(f"cannot crop {size}x{size} from {H}x{W}")
    oy, ox = (H - size) // 2, (W - size) // 2
    return images[:, oy : oy + size, ox : ox + size, :]


def random_brightness(images, rng):
    """One shift per image, uniform in [-0.25, 0.25), on [0,1] pixels."""
    delta = rng.uniform(*BRIGHTNESS_RANGE, size=(len(images), 1, 1, 1)).astype(images.dtype)
    return np.clip(images + delta, 0.0, 1.0)


def random_hflip(images, rng):
    flip = rng.random(len(images)) < FLIP_PROBABILITY
    out = images.copy()
    out[flip] = out[flip, :, ::-1, :]
    return out


def standardize(images):
    """Per image over all pixels and channels: zero mean, unit population
    std (floored so constant images map to zeros)."""
    mean = images.mean(axis=(1, 2, 3), keepdims=True)
    std = images.std(axis=(1, 2, 3), keepdims=True)
    return (images - mean) / np.maximum(std, STD_FLOOR)


def prepare_batch(images_u8, spec: DatasetSpec, train, rng=None):
    """Full pipeline for one batch of raw u8 images.

    Returns (network_input, recon_target): the standardized crop and the
    same crop still in [0,1].
    """
    x = images_u8.astype(np.float32) / 255.0
    if train:
        if rng is None:
            raise ValueError("training augmentation needs an rng")
        if spec.brightness:
            x = random_brightness(x, rng)
        if spec.hflip:
            x = random_hflip(x, rng)
        crop = random_crop(x, CROP_SIZE, rng)
    else:
        crop = center_crop(x, CROP_SIZE)
    return standardize(crop), crop


def batch_iter(n, batch_size, rng=None):
    """Yield index batches covering [0, n) once; a seeded rng shuffles, the
    final short batch is kept."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
