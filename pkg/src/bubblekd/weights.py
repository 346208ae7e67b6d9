"""Binary weight container.

Layout (all integers little-endian):
    magic "DFW1" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 dtype tag |
                u8 rank | u32 * rank extents | row-major payload
    trailer: u64 checksum (leading 8 bytes of SHA-256) over all payload
    bytes in file order

Loading is all-or-nothing: the file is fully parsed and validated
against the target model before any parameter is assigned.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    ChecksumMismatchError,
    TensorMismatchError,
    TruncatedPayloadError,
)
from .nn import Model

MAGIC = b"DFW1"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

def _checksum64(chunks) -> int:
    """First 8 bytes of SHA-256 over the concatenated payloads."""
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return int.from_bytes(h.digest()[:8], "little")


def save_weights(model: Model, sink) -> None:
    """Write the model's parameters to a path or binary file object."""
    own = isinstance(sink, (str, Path))
    fh = open(sink, "wb") if own else sink
    try:
        params = model.parameters()
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        payloads = []
        for name, tensor in params.items():
            arr = np.ascontiguousarray(tensor.data)
            tag = _TAG_FOR_KIND[arr.dtype.newbyteorder("=")]
            raw = arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes()
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(raw)
            payloads.append(raw)
        fh.write(struct.pack("<Q", _checksum64(payloads)))
    finally:
        if own:
            fh.close()


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedPayloadError(f"file ends inside {what} ({len(buf)}/{n} bytes)")
    return buf


def read_weight_table(source) -> dict[str, np.ndarray]:
    """Parse a weight container into {name: array}, verifying the checksum."""
    own = isinstance(source, (str, Path))
    fh = open(source, "rb") if own else source
    try:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise BadVersionError(f"unsupported container version {version}")
        table: dict[str, np.ndarray] = {}
        payloads = []
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"tensor {i} name length"))
            name = _read_exact(fh, name_len, f"tensor {i} name").decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(fh, 2, f"{name} dtype/rank"))
            if tag not in _DTYPE_TAGS:
                raise TensorMismatchError(f"{name}: unknown dtype tag {tag}")
            extents = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"{name} extents"))
            dtype = _DTYPE_TAGS[tag]
            nbytes = int(np.prod(extents, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            raw = _read_exact(fh, nbytes, f"{name} payload")
            payloads.append(raw)
            table[name] = np.frombuffer(raw, dtype=dtype).reshape(extents).astype(dtype.newbyteorder("="))
        (stored,) = struct.unpack("<Q", _read_exact(fh, 8, "checksum"))
        actual = _checksum64(payloads)
        if stored != actual:
            raise ChecksumMismatchError(f"payload checksum {actual:#x} != stored {stored:#x}")
        return table
    finally:
        if own:
            fh.close()


def load_weights(source, model: Model) -> Model:
    """Fill `model`'s parameters from a container; returns the model.

    Raises TensorMismatchError naming the first offending tensor if the
    stored set does not exactly match the model's names and shapes.
    """
    table = read_weight_table(source)
    params = model.parameters()
    for name, tensor in params.items():
        if name not in table:
            raise TensorMismatchError(f"container is missing tensor {name!r}")
        arr = table[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise TensorMismatchError(
                f"tensor {name!r}: stored shape {tuple(arr.shape)} != model shape {tuple(tensor.shape)}"
            )
        if arr.dtype != tensor.data.dtype:
            raise TensorMismatchError(
                f"tensor {name!r}: stored dtype {arr.dtype} != model dtype {tensor.data.dtype}"
            )
    extra = set(table) - set(params)
    if extra:
        raise TensorMismatchError(f"container has unknown tensor {sorted(extra)[0]!r}")
    for name, tensor in params.items():
        tensor.data = table[name].copy()
        tensor.grad = None
    return model


def clone_state(model: Model) -> dict[str, np.ndarray]:
    """In-memory snapshot of the parameter arrays."""
    return {name: p.data.copy() for name, p in model.parameters().items()}


def restore_state(model: Model, state: dict[str, np.ndarray]) -> None:
    for name, p in model.parameters().items():
        p.data = state[name].copy()
        p.grad = None


def save_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    save_weights(model, buf)
    return buf.getvalue()
