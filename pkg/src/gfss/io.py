"""GFST binary tensor files and JSON manifests.

Layout of a GFST file::

    b"GFST" | u32 version (=1) | u8 dtype (0=f32, 1=f64) | u8 rank
    | rank x u64 dims | row-major little-endian payload

All integers are little-endian. Label masks are stored as float tensors
holding integral values.
"""

import json
import os
import struct

import numpy as np

MAGIC = b"GFST"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


def encode_tensor(arr):
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return header + payload


def decode_tensor(buf):
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise FormatError("not a GFST tensor (bad magic)")
    version, code, rank = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported GFST version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 10
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = off + count * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"payload size mismatch: {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def save_tensor(path, arr):
    with open(path, "wb") as f:
        f.write(encode_tensor(arr))


def load_tensor(path):
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def save_manifest(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path):
    with open(path) as f:
        return json.load(f)


def fresh_dir(path):
    """Create ``path``; refuse to reuse a non-empty directory."""
    if os.path.isdir(path) and os.listdir(path):
        raise FileExistsError(f"output directory {path} exists and is not empty")
    os.makedirs(path, exist_ok=True)
    return path
