"""Conversion manifests: what was read, what was written, and how."""

import hashlib
from pathlib import Path


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, sources, outputs, count, dims, preprocessing):
    """Structured text beside the converted files: source/output names with
    checksums, the image count and dims, and the preprocessing applied."""
    lines = ["format=capsdata-conversion-manifest", "version=1"]
    for src in sources:
        lines.append(f"source={Path(src).name} sha256={sha256_of(src)}")
    for out in outputs:
        lines.append(f"output={Path(out).name} sha256={sha256_of(out)}")
    lines.append(f"images={count}")
    lines.append("dims=" + "x".join(str(d) for d in dims))
    lines.append(f"preprocessing={preprocessing}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
