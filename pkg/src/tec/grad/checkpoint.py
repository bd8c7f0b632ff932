"""Binary tensor container used for checkpoints and Mel files.

Layout (little endian):

    magic      4 bytes  ("TECK" for checkpoints, "MEL1" for Mel matrices)
    version    u32
    count      u32      number of records
    records    count x { name_len u32, name utf-8, rank u32, dims u64 * rank,
                         payload f64 * prod(dims) }
    checksum   u32      CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

CHECKPOINT_MAGIC = b"TECK"
MEL_MAGIC = b"MEL1"
FORMAT_VERSION = 1
_META_PREFIX = "__meta__/"


class FormatError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray], magic: bytes = CHECKPOINT_MAGIC,
           meta: Mapping[str, object] = None) -> bytes:
    items = list(arrays.items())
    if meta:
        blob = json.dumps(meta, sort_keys=True).encode()
        items.append((_META_PREFIX + "json", np.frombuffer(blob, dtype=np.uint8).astype(np.float64)))
    out = bytearray()
    out += magic
    out += struct.pack("<II", FORMAT_VERSION, len(items))
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode(blob: bytes, magic: bytes = CHECKPOINT_MAGIC) -> Tuple[Dict[str, np.ndarray], dict]:
    if len(blob) < 16 or blob[:4] != magic:
        raise FormatError(f"bad magic: expected {magic!r}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("checksum mismatch")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = 12
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    meta: dict = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
        if name == _META_PREFIX + "json":
            meta = json.loads(arr.astype(np.uint8).tobytes().decode())
        else:
            arrays[name] = arr
    if pos != len(blob) - 4:
        raise FormatError("trailing bytes before checksum")
    return dict(arrays), meta


def save(path: Union[str, Path], arrays: Mapping[str, np.ndarray], meta=None,
         magic: bytes = CHECKPOINT_MAGIC) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(arrays, magic, meta))


def load(path: Union[str, Path], magic: bytes = CHECKPOINT_MAGIC):
    return decode(Path(path).read_bytes(), magic)


def save_mel(path, mel: np.ndarray, meta=None) -> None:
    save(path, {"mel": mel}, meta, magic=MEL_MAGIC)


def load_mel(path) -> Tuple[np.ndarray, dict]:
    arrays, meta = load(path, magic=MEL_MAGIC)
    return arrays["mel"], meta
