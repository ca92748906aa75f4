"""Small-NORB converter.

The source is a pair of binary-matrix files: a -dat file with (N, 2, 96,
96) u8 stereo images and a -cat file with N int32 category labels (5 toy
classes). Only the left stereo channel is kept, and images are downscaled
96 -> 28 by exact area averaging before being written as u8.
"""

import argparse
import struct
from pathlib import Path

import numpy as np

from .canonical import write_canonical
from .manifest import write_manifest

MAGIC_UINT8 = 0x1E3D4C55
MAGIC_INT32 = 0x1E3D4C54

_DTYPES = {MAGIC_UINT8: np.dtype(np.uint8), MAGIC_INT32: np.dtype("<i4")}


def read_binary_matrix(path) -> np.ndarray:
    """Parse the little-endian binary-matrix format: magic, ndim, then
    max(ndim, 3) dims, then the row-major payload."""
    blob = Path(path).read_bytes()
    magic, ndim = struct.unpack("<II", blob[:8])
    if magic not in _DTYPES:
        raise ValueError(f"{path}: bad binary-matrix magic 0x{magic:08x}")
    n_stored = max(ndim, 3)
    dims = struct.unpack(f"<{n_stored}I", blob[8 : 8 + 4 * n_stored])[:ndim]
    dtype = _DTYPES[magic]
    payload = blob[8 + 4 * n_stored :]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, dims declare {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims)


def area_average_matrix(n_in, n_out) -> np.ndarray:
    """(n_out, n_in) weights; row i averages input cells overlapping output
    bin i with fractional edge coverage. Rows sum to exactly 1."""
    w = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        lo, hi = i * ratio, (i + 1) * ratio
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                w[i, j] = overlap / ratio
    return w


def resize_area(images, size) -> np.ndarray:
    """(N, H, W) -> (N, size, size) by separable area averaging."""
    n, h, w = images.shape
    wr = area_average_matrix(h, size)
    wc = area_average_matrix(w, size)
    out = np.einsum("oh,nhw,pw->nop", wr, images.astype(np.float64), wc, optimize=True)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def convert_norb(dat_path, cat_path, out_dir, split) -> dict:
    images = read_binary_matrix(dat_path)
    labels = read_binary_matrix(cat_path).reshape(-1).astype(np.int64)
    if images.ndim != 4 or images.shape[1] != 2 or images.shape[2:] != (96, 96):
        raise ValueError(f"{dat_path}: images have shape {images.shape}, expected (N, 2, 96, 96)")
    if len(labels) != len(images):
        raise ValueError(f"{dat_path}: {len(images)} images vs {len(labels)} labels")
    if labels.min() < 0 or labels.max() > 4:
        raise ValueError(f"{cat_path}: labels outside [0, 5)")

    left = images[:, 0]  # left stereo channel only
    small = resize_area(left, 28)[..., None]  # (N, 28, 28, 1)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images_path = out_dir / f"{split}-images.caps"
    labels_path = out_dir / f"{split}-labels.caps"
    write_canonical(images_path, small)
    write_canonical(labels_path, labels.astype(np.uint8))
    manifest_path = write_manifest(
        out_dir / f"{split}-manifest.txt",
        sources=[dat_path, cat_path],
        outputs=[images_path, labels_path],
        count=len(small),
        dims=small.shape,
        preprocessing="left stereo channel; area-average resize 96->28",
    )
    return {"images": images_path, "labels": labels_path, "manifest": manifest_path,
            "count": len(small)}


def main(argv=None):
    parser = argparse.ArgumentParser(description="convert Small-NORB binary-matrix files")
    parser.add_argument("dat", help="the -dat images file")
    parser.add_argument("cat", help="the -cat labels file")
    parser.add_argument("out_dir", help="output directory (e.g. data/norb)")
    parser.add_argument("--split", choices=("train", "test"), required=True)
    args = parser.parse_args(argv)
    result = convert_norb(args.dat, args.cat, args.out_dir, args.split)
    print(f"wrote {result['count']} images to {result['images']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
