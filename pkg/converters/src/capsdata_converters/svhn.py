"""SVHN cropped-digits converter.

The source distribution is a MATLAB container with X (32, 32, 3, N) uint8
images and y (N, 1) labels where the digit zero is stored as 10. Output is
N x 32 x 32 x 3 u8 images with labels remapped so zero is class 0, plus a
conversion manifest.
"""

import argparse
from pathlib import Path

import numpy as np
from scipy.io import loadmat

from .canonical import write_canonical
from .manifest import write_manifest


def convert_svhn(source_mat, out_dir, split) -> dict:
    mat = loadmat(source_mat)
    missing = [k for k in ("X", "y") if k not in mat]
    if missing:
        raise ValueError(f"{source_mat}: missing variables {missing} in source container")
    x = mat["X"]
    y = mat["y"]
    if x.ndim != 4 or x.shape[:3] != (32, 32, 3):
        raise ValueError(f"{source_mat}: X has shape {x.shape}, expected (32, 32, 3, N)")

    images = np.ascontiguousarray(np.transpose(x, (3, 0, 1, 2))).astype(np.uint8)
    labels = y.reshape(-1).astype(np.int64)
    if len(labels) != len(images):
        raise ValueError(f"{source_mat}: {len(images)} images vs {len(labels)} labels")
    if labels.min() < 1 or labels.max() > 10:
        raise ValueError(f"{source_mat}: labels outside the 1..10 source convention")
    labels = np.where(labels == 10, 0, labels).astype(np.uint8)  # source stores zero as 10

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images_path = out_dir / f"{split}-images.caps"
    labels_path = out_dir / f"{split}-labels.caps"
    write_canonical(images_path, images)
    write_canonical(labels_path, labels)
    manifest_path = write_manifest(
        out_dir / f"{split}-manifest.txt",
        sources=[source_mat],
        outputs=[images_path, labels_path],
        count=len(images),
        dims=images.shape,
        preprocessing="transpose HWCN->NHWC; label 10 remapped to 0",
    )
    return {"images": images_path, "labels": labels_path, "manifest": manifest_path,
            "count": len(images)}


def _infer_split(path):
    name = Path(path).name.lower()
    if "train" in name:
        return "train"
    if "test" in name:
        return "test"
    return None


def main(argv=None):
    parser = argparse.ArgumentParser(description="convert SVHN cropped-digits .mat files")
    parser.add_argument("source", help="e.g. train_32x32.mat or test_32x32.mat")
    parser.add_argument("out_dir", help="output directory (e.g. data/svhn)")
    parser.add_argument("--split", choices=("train", "test"),
                        help="inferred from the file name when omitted")
    args = parser.parse_args(argv)
    split = args.split or _infer_split(args.source)
    if split is None:
        parser.error("cannot infer split from file name; pass --split")
    result = convert_svhn(args.source, args.out_dir, split)
    print(f"wrote {result['count']} images to {result['images']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
