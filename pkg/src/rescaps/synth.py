"""Synthetic digit fixtures.

Renders a deterministic MNIST-shaped dataset (28x28 u8 grayscale, 10
classes) from 5x7 bitmap glyphs with per-sample jitter in position, scale,
stroke intensity, and pixel noise, and writes it in IDX layout so the real
data pipeline runs end to end. This exists for tests and demos on machines
that do not have the actual datasets; it is not one of the four benchmark
datasets and the CLI never selects it implicitly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import IDX_FILES, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC

GLYPHS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],  # 0
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],  # 1
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],  # 2
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],  # 3
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],  # 4
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],  # 5
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],  # 6
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],  # 7
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],  # 8
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],  # 9
]

_BITMAPS = [
    np.array([[int(c) for c in row] for row in glyph], dtype=np.float32) for glyph in GLYPHS
]


def render_digit(label, rng, size=28):
    # roughly MNIST-like statistics: a size-normalized glyph near the
    # center with small positional jitter, intensity spread, and noise
    scale = int(rng.integers(2, 4))  # 10x14 or 15x21 glyph
    glyph = np.kron(_BITMAPS[label], np.ones((scale, scale), dtype=np.float32))
    gh, gw = glyph.shape
    cy, cx = (size - gh) // 2, (size - gw) // 2
    oy = int(np.clip(cy + rng.integers(-3, 4), 0, size - gh))
    ox = int(np.clip(cx + rng.integers(-3, 4), 0, size - gw))
    img = np.zeros((size, size), dtype=np.float32)
    img[oy : oy + gh, ox : ox + gw] = glyph * rng.uniform(0.55, 1.0)
    img = img * 255.0 + rng.normal(0.0, 10.0, size=(size, size))
    return np.clip(img, 0, 255).astype(np.uint8)


def make_digits(n, seed, classes=10):
    """Balanced label cycle, shuffled; (images u8 Nx28x28x1, labels i64 N)."""
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(classes), n // classes + 1)[:n]
    rng.shuffle(labels)
    images = np.stack([render_digit(int(l), rng) for l in labels])[..., None]
    return images, labels.astype(np.int64)


def write_idx_images(path, images):
    n, h, w = images.shape[0], images.shape[1], images.shape[2]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(images[..., 0], dtype=np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def make_idx_data_dir(root, n_train=512, n_test=256, seed=0, dataset="mnist"):
    """Write a synthetic train/test pair in IDX layout under root/<dataset>/
    so load_dataset(dataset, root, ...) works. Returns the root."""
    root = Path(root)
    target = root / dataset
    target.mkdir(parents=True, exist_ok=True)
    for split, n, split_seed in (("train", n_train, seed), ("test", n_test, seed + 1)):
        images, labels = make_digits(n, split_seed)
        img_name, lab_name = IDX_FILES[split]
        write_idx_images(target / img_name, images)
        write_idx_labels(target / lab_name, labels)
    return root


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(description="write synthetic digit data in IDX layout")
    parser.add_argument("out", help="data directory root (files go in <out>/<dataset>/)")
    parser.add_argument("--train", type=int, default=6000)
    parser.add_argument("--test", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--dataset", default="mnist", help="directory name to write under")
    args = parser.parse_args(argv)
    make_idx_data_dir(args.out, args.train, args.test, args.seed, args.dataset)
    print(f"wrote {args.train}+{args.test} synthetic digits under {args.out}/{args.dataset}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
