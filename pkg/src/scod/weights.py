"""Binary weight container.

Layout: the magic ``b"SCODW1"`` followed by one record per tensor::

    u64 name_length | name (utf-8) | u64 rank | u64 extent * rank | f64 value * prod(extents)

All integers and floats are little-endian. Records run until end of file.
"""

import struct

import numpy as np

MAGIC = b"SCODW1"


class WeightFileError(ValueError):
    pass


def dumps(tensors):
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(data):
    if not data.startswith(MAGIC):
        raise WeightFileError("missing SCODW1 magic bytes")
    out = {}
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightFileError(f"truncated record at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        out[name] = values.reshape(shape)
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
