"""Writer for the canonical tensor container.

Byte layout (shared contract with the training pipeline, which has its own
reader): magic "CAPS", u32-LE version = 1, u8 dtype code (0 = u8,
1 = f32 LE), u8 rank, rank u32-LE dims, row-major payload.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CAPS"
VERSION = 1


def canonical_bytes(array) -> bytes:
    array = np.ascontiguousarray(array)
    if array.dtype == np.uint8:
        code = 0
    elif array.dtype in (np.float32, np.dtype("<f4")):
        code = 1
        array = array.astype("<f4", copy=False)
    else:
        raise ValueError(f"canonical container supports u8/f32, not {array.dtype}")
    header = MAGIC + struct.pack("<IBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.tobytes()


def write_canonical(path, array):
    Path(path).write_bytes(canonical_bytes(array))
