"""LTSR: a tiny binary tensor container for checkpoints and datasets.

Layout (all integers little-endian):

    magic   "LTSR"          4 bytes
    version u32 = 1
    ndim    u32
    dims    u32[ndim]
    dtype   u8 (0 = float64)
    reserved 3 bytes
    payload row-major little-endian float64

A named-segment variant appends a UTF-8 JSON footer (offset table plus free-form
metadata) followed by its u64 byte length.  Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamVector

MAGIC = b"LTSR"
VERSION = 1
DTYPE_F64 = 0

__all__ = [
    "LtsrError",
    "LtsrMagicError",
    "LtsrTruncationError",
    "LtsrDtypeError",
    "LtsrFile",
    "save_ltsr",
    "load_ltsr",
    "save_params",
    "load_params",
]


class LtsrError(RuntimeError):
    pass


class LtsrMagicError(LtsrError):
    pass


class LtsrTruncationError(LtsrError):
    pass


class LtsrDtypeError(LtsrError):
    pass


@dataclass
class LtsrFile:
    """A loaded container: the tensor plus the optional footer contents."""

    tensor: np.ndarray
    segments: dict[str, tuple[int, tuple[int, ...]]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_ltsr(tensor: np.ndarray, path, segments=None, meta=None) -> None:
    """Write a float64 tensor; optional segment table and metadata go in the footer."""
    tensor = np.ascontiguousarray(tensor, dtype=np.float64)
    header = MAGIC + struct.pack("<II", VERSION, tensor.ndim)
    header += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
    header += struct.pack("<B3x", DTYPE_F64)
    payload = tensor.astype("<f8", copy=False).tobytes()
    blob = header + payload
    if segments is not None or meta is not None:
        footer_obj = {
            "segments": {k: {"offset": int(off), "shape": [int(s) for s in shape]}
                         for k, (off, shape) in (segments or {}).items()},
            "meta": meta or {},
        }
        footer = json.dumps(footer_obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
        blob += footer + struct.pack("<Q", len(footer))
    with open(path, "wb") as fh:
        fh.write(blob)


def load_ltsr(path) -> LtsrFile:
    """Read a container; raises a distinct error per corruption mode."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise LtsrMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise LtsrTruncationError(f"{path}: truncated header")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise LtsrError(f"{path}: unsupported version {version}")
    off = 12
    if len(blob) < off + 4 * ndim + 4:
        raise LtsrTruncationError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    (dtype_code,) = struct.unpack_from("<B", blob, off)
    off += 4  # dtype byte + 3 reserved
    if dtype_code != DTYPE_F64:
        raise LtsrDtypeError(f"{path}: unsupported dtype code {dtype_code}")
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload_bytes = count * 8
    remaining = len(blob) - off
    segments: dict[str, tuple[int, tuple[int, ...]]] = {}
    meta: dict = {}
    if remaining == payload_bytes:
        footer = None
    elif remaining > payload_bytes + 8:
        (footer_len,) = struct.unpack_from("<Q", blob, len(blob) - 8)
        if off + payload_bytes + footer_len + 8 != len(blob):
            raise LtsrTruncationError(f"{path}: payload/footer length mismatch")
        footer = blob[off + payload_bytes:len(blob) - 8]
    else:
        raise LtsrTruncationError(
            f"{path}: payload length mismatch (header says {payload_bytes} bytes, "
            f"file carries {remaining})")
    tensor = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
    tensor = tensor.copy()  # decouple from the read buffer
    if footer is not None:
        obj = json.loads(footer.decode("utf-8"))
        segments = {k: (int(v["offset"]), tuple(int(s) for s in v["shape"]))
                    for k, v in obj.get("segments", {}).items()}
        meta = obj.get("meta", {})
    return LtsrFile(tensor=tensor, segments=segments, meta=meta)


def save_params(params: ParamVector, path, meta=None) -> None:
    """Serialize a named-segment parameter vector (1-d payload + offset table)."""
    save_ltsr(params.values, path, segments=params.layout, meta=meta)


def load_params(path) -> tuple[ParamVector, dict]:
    f = load_ltsr(path)
    if f.tensor.ndim != 1:
        raise LtsrError(f"{path}: expected a flat parameter payload")
    return ParamVector(f.tensor, f.segments), f.meta
