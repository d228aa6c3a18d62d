"""Binary checkpoint format shared by trainer and analysis tools.

Layout (little-endian throughout):
    magic   4 bytes  "SFCK"
    version u32      currently 1
    count   u32      number of tensor records
then per record:
    name_len u32, name UTF-8 bytes,
    dtype    u8   (0 = float64, 1 = float32),
    rank     u32, dims u32 * rank,
    payload  raw row-major floats.

Records are written sorted by name so identical tensors always produce
byte-identical files.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

MAGIC = b"SFCK"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_TAG_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def save_checkpoint(path, named_tensors: dict) -> None:
    """Write name -> array (or Tensor) records; bit-exact round-trip."""
    items = []
    for name in sorted(named_tensors):
        value = named_tensors[name]
        # note: ascontiguousarray would promote rank-0 arrays to rank 1
        arr = np.asarray(getattr(value, "data", value), order="C")
        if arr.dtype not in _DTYPE_TAGS:
            raise DataError(f"checkpoint tensor {name!r} has unsupported dtype {arr.dtype}")
        items.append((name, arr))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BI", _DTYPE_TAGS[arr.dtype], arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> dict:
    """Read records back as name -> numpy array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tag, rank = struct.unpack_from("<BI", blob, offset)
        offset += 5
        dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        dtype = _TAG_DTYPES.get(tag)
        if dtype is None:
            raise DataError(f"{path}: unknown dtype tag {tag} for {name!r}")
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=offset).reshape(dims)
        offset += n * dtype.itemsize
        out[name] = arr.astype(dtype.newbyteorder("="))
    if offset != len(blob):
        raise DataError(f"{path}: trailing bytes after last record")
    return out
