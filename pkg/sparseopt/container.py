"""
PSBR container codec, shared by checkpoints and BSR exports.

Layout (all integers little-endian)::

    b"PSBR"  u32 version
    per tensor, until end of file:
        u32 name_len, name (UTF-8)
        u32 rows, u32 cols, u32 r, u32 c
        u64 n, u32[n] indptr
        u64 n, u32[n] indices
        u64 n, f32[n] data

Dense tensors are written as one r = rows, c = cols block. The resolved run
config travels as an empty 0x0 section named ``__config__:<json>``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from .bsr_kernels import BsrMatrix, bsr_to_dense
from .exceptions import DimensionError, StructuralError

logger = logging.getLogger(__name__)

MAGIC = b"PSBR"
FORMAT_VERSION = 1
CONFIG_PREFIX = "__config__:"

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_DIMS = struct.Struct("<IIII")

Tensor = Union[np.ndarray, BsrMatrix]


@dataclass
class Container:
    tensors: Dict[str, BsrMatrix] = field(default_factory=dict)
    config: Optional[Dict[str, Any]] = None

    def dense(self, name: str) -> np.ndarray:
        return bsr_to_dense(self.tensors[name])

    def dense_tensors(self) -> Dict[str, np.ndarray]:
        return {name: bsr_to_dense(m) for name, m in self.tensors.items()}


def dense_section(array: np.ndarray) -> BsrMatrix:
    """Wrap a dense tensor as a single full-size block; 1-D tensors become 1 x d."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise DimensionError(f"container tensors must be 1-D or 2-D, got {array.ndim}-D")
    rows, cols = array.shape
    if rows == 0 or cols == 0:
        raise DimensionError(f"cannot store empty tensor of shape {array.shape}")
    return BsrMatrix(
        rows=rows,
        cols=cols,
        block_rows=rows,
        block_cols=cols,
        indptr=np.array([0, 1], dtype=np.uint32),
        indices=np.array([0], dtype=np.uint32),
        data=array.reshape(1, rows, cols).copy(),
    )


def _config_section() -> BsrMatrix:
    return BsrMatrix(0, 0, 1, 1, np.zeros(1, dtype=np.uint32), np.zeros(0, dtype=np.uint32),
                     np.zeros((0, 1, 1)))


def _write_array(out: bytearray, array: np.ndarray, dtype: str) -> None:
    flat = np.ascontiguousarray(array, dtype=dtype).ravel()
    out += _U64.pack(flat.shape[0])
    out += flat.tobytes()


def encode(tensors: Mapping[str, Tensor], config: Optional[Mapping[str, Any]] = None) -> bytes:
    out = bytearray(MAGIC)
    out += _U32.pack(FORMAT_VERSION)
    sections = []
    if config is not None:
        sections.append((CONFIG_PREFIX + json.dumps(dict(config), sort_keys=True), _config_section()))
    for name, tensor in tensors.items():
        if name.startswith(CONFIG_PREFIX):
            raise StructuralError(f"tensor name {name!r} uses the reserved config prefix")
        sections.append((name, tensor if isinstance(tensor, BsrMatrix) else dense_section(tensor)))

    for name, m in sections:
        if m.rows or m.cols:
            m.validate()
        encoded = name.encode("utf-8")
        out += _U32.pack(len(encoded))
        out += encoded
        out += _DIMS.pack(m.rows, m.cols, m.block_rows, m.block_cols)
        _write_array(out, m.indptr, "<u4")
        _write_array(out, m.indices, "<u4")
        _write_array(out, m.data, "<f4")
    return bytes(out)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.payload)

    def take(self, n: int) -> bytes:
        end = self.offset + n
        if end > len(self.payload):
            raise StructuralError(
                f"truncated container: needed {n} bytes at offset {self.offset}, "
                f"{len(self.payload) - self.offset} left"
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))

    def array(self, dtype: str, itemsize: int) -> np.ndarray:
        (n,) = self.unpack(_U64)
        return np.frombuffer(self.take(n * itemsize), dtype=dtype).copy()


def decode(payload: bytes) -> Container:
    reader = _Reader(payload)
    if reader.take(len(MAGIC)) != MAGIC:
        raise StructuralError("not a PSBR container (bad magic bytes)")
    (version,) = reader.unpack(_U32)
    if version != FORMAT_VERSION:
        raise StructuralError(f"unsupported container version {version}")

    container = Container()
    while not reader.exhausted:
        (name_len,) = reader.unpack(_U32)
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise StructuralError(f"tensor name at offset {reader.offset} is not UTF-8") from e
        rows, cols, r, c = reader.unpack(_DIMS)
        indptr = reader.array("<u4", 4).astype(np.uint32)
        indices = reader.array("<u4", 4).astype(np.uint32)
        data = reader.array("<f4", 4).astype(np.float64)

        if name.startswith(CONFIG_PREFIX):
            try:
                container.config = json.loads(name[len(CONFIG_PREFIX):])
            except json.JSONDecodeError as e:
                raise StructuralError(f"embedded config is not valid JSON: {e}") from e
            continue
        if r == 0 or c == 0 or data.shape[0] % (r * c):
            raise StructuralError(f"tensor {name!r}: data length {data.shape[0]} "
                                  f"is not a multiple of block {r}x{c}")
        m = BsrMatrix(rows, cols, r, c, indptr, indices, data.reshape(-1, r, c))
        m.validate()
        if name in container.tensors:
            raise StructuralError(f"duplicate tensor {name!r}")
        container.tensors[name] = m
    logger.debug("decoded %d tensors (config embedded: %s)", len(container.tensors),
                 container.config is not None)
    return container


def save(path: Union[str, Path], tensors: Mapping[str, Tensor],
         config: Optional[Mapping[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors, config))
    return path


def load(path: Union[str, Path]) -> Container:
    return decode(Path(path).read_bytes())
