"""PLAD binary tensor format and named-tensor checkpoint directories.

Layout of one tensor record (all little-endian)::

    b"PLAD" | u32 version=1 | u8 dtype (0 = f64) | u8 rank | rank x u64 dims | payload

A checkpoint is a directory holding one ``<name>.plad`` file per tensor
(``/`` in a name becomes a subdirectory) and a ``manifest.json``.
"""
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PLAD"
VERSION = 1
DTYPE_F64 = 0


def encode(array):
    a = np.ascontiguousarray(array, dtype="<f8")
    if a.ndim > 255:
        raise FormatError(f"rank {a.ndim} exceeds the u8 rank field")
    head = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F64, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode(buf):
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise FormatError("missing PLAD magic bytes")
    version, dtype, rank = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported PLAD version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported PLAD dtype code {dtype}")
    off = 10
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != 8 * count:
        raise FormatError(f"payload holds {len(buf) - off} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", offset=off).reshape(dims).astype(np.float64)


def save_tensor(path, array):
    Path(path).write_bytes(encode(array))


def load_tensor(path):
    return decode(Path(path).read_bytes())


def save_checkpoint(directory, tensors, manifest=None):
    """Write ``tensors`` (name -> array) plus a manifest describing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        path = directory / f"{name}.plad"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_tensor(path, arr)
        index[name] = list(arr.shape)
    doc = dict(manifest or {})
    doc["tensors"] = index
    (directory / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory):
    """Return ``(tensors, manifest)`` from a checkpoint directory."""
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    tensors = {}
    for name, shape in manifest["tensors"].items():
        arr = load_tensor(directory / f"{name}.plad")
        if list(arr.shape) != list(shape):
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, manifest says {shape}")
        tensors[name] = arr
    return tensors, manifest
