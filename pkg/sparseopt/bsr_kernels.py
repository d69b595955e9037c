"""
Block Sparse Row storage and kernels.

A BsrMatrix stores the r x c blocks that hold at least one entry above
``zero_tol``. ``indptr`` has one entry per block-row plus one, ``indices``
holds the block-column of every stored block (ascending within a
block-row) and ``data`` packs the blocks row-major, shape (blocks, r, c).
Matrices whose dimensions are not block multiples are padded logically:
``rows``/``cols`` keep the true size and the last block-row/column is
zero-filled.

Two kernel paths exist. ``reference`` is a serial scalar loop nest.
``vectorized`` runs the same nest with ``prange`` over chunks of output
block-rows and a contiguous axpy inner loop that LLVM vectorizes. Both
accumulate every output entry in the same order (block-rows outer, stored
blocks in index order), so results are deterministic.
"""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple

import numba
import numpy as np
from numba import njit, prange

from .config import KERNEL_PATH_ENV, env_threads
from .exceptions import DimensionError, ParameterError, StructuralError
from .prox_core import block_grid, block_norms

logger = logging.getLogger(__name__)

INDEX_DTYPE = np.uint32
MAX_BLOCKS = 2 ** 31


class KernelPath(str, enum.Enum):
    REFERENCE = "reference"
    VECTORIZED = "vectorized"


@dataclass(frozen=True)
class KernelConfig:
    """Column tile width over the dense operand and block-rows per parallel work item.

    ``tile_cols == 0`` means untiled (the whole row panel at once).
    """

    tile_cols: int = 0
    grain: int = 1

    def __post_init__(self):
        if self.tile_cols < 0 or self.grain < 1:
            raise ParameterError(f"invalid kernel config {self}")


def default_kernel_path() -> KernelPath:
    raw = os.environ.get(KERNEL_PATH_ENV, "").strip().lower()
    if raw:
        try:
            return KernelPath(raw)
        except ValueError:
            logger.warning("ignoring unknown %s=%r", KERNEL_PATH_ENV, raw)
    return KernelPath.VECTORIZED


def configure_threads() -> int:
    """Apply the PSBR_THREADS cap to numba; returns the active thread count."""
    cap = env_threads()
    if cap is not None:
        numba.set_num_threads(min(cap, numba.config.NUMBA_NUM_THREADS))
    return numba.get_num_threads()


# ============================================================================
# STORAGE
# ============================================================================

@dataclass(frozen=True)
class BsrMatrix:
    rows: int
    cols: int
    block_rows: int
    block_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def block_shape(self) -> Tuple[int, int]:
        return (self.block_rows, self.block_cols)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def grid(self) -> Tuple[int, int]:
        return (-(-self.rows // self.block_rows), -(-self.cols // self.block_cols))

    @property
    def padded_shape(self) -> Tuple[int, int]:
        grid_rows, grid_cols = self.grid
        return (grid_rows * self.block_rows, grid_cols * self.block_cols)

    @property
    def nnz_blocks(self) -> int:
        return int(self.indices.shape[0])

    @property
    def block_density(self) -> float:
        total = self.grid[0] * self.grid[1]
        return self.nnz_blocks / total if total else 0.0

    @cached_property
    def _kernel_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            self.indptr.astype(np.int64),
            self.indices.astype(np.int64),
            np.ascontiguousarray(self.data, dtype=np.float64),
        )

    def validate(self) -> None:
        """Raise StructuralError unless every BSR invariant holds."""
        r, c = self.block_shape
        if r < 1 or c < 1:
            raise StructuralError(f"block shape {r}x{c} must be positive")
        grid_rows, grid_cols = self.grid
        indptr, indices = self.indptr, self.indices
        if indptr.ndim != 1 or indptr.shape[0] != grid_rows + 1:
            raise StructuralError(
                f"indptr length {indptr.shape[0]} != block-rows + 1 = {grid_rows + 1}"
            )
        if grid_rows and indptr[0] != 0:
            raise StructuralError(f"indptr[0] must be 0, got {indptr[0]}")
        if np.any(np.diff(indptr.astype(np.int64)) < 0):
            raise StructuralError("indptr must be non-decreasing")
        if int(indptr[-1]) != indices.shape[0]:
            raise StructuralError(
                f"indptr[-1] = {indptr[-1]} but {indices.shape[0]} block indices are stored"
            )
        if indices.shape[0] and int(indices.max()) >= grid_cols:
            raise StructuralError(f"block index {indices.max()} out of range {grid_cols}")
        wide = indices.astype(np.int64)
        for block_row in range(grid_rows):
            seg = wide[indptr[block_row]:indptr[block_row + 1]]
            if seg.shape[0] > 1 and np.any(np.diff(seg) <= 0):
                raise StructuralError(f"indices of block-row {block_row} are not strictly ascending")
        if self.data.shape != (indices.shape[0], r, c):
            raise StructuralError(
                f"data shape {self.data.shape} != ({indices.shape[0]}, {r}, {c})"
            )


def dense_to_bsr(
    dense: np.ndarray,
    block_rows: int,
    block_cols: int,
    zero_tol: float = 0.0,
    pad: bool = False,
) -> BsrMatrix:
    """Store every block with at least one ``|value| > zero_tol``."""
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got {dense.ndim}-D")
    if zero_tol < 0:
        raise ParameterError(f"zero_tol must be >= 0, got {zero_tol}")
    rows, cols = dense.shape
    grid_rows, grid_cols = block_grid(dense.shape, block_rows, block_cols, pad)
    padded = np.zeros((grid_rows * block_rows, grid_cols * block_cols))
    padded[:rows, :cols] = dense
    blocks = padded.reshape(grid_rows, block_rows, grid_cols, block_cols).transpose(0, 2, 1, 3)

    stored = np.abs(blocks).max(axis=(2, 3), initial=0.0) > zero_tol
    if int(stored.sum()) >= MAX_BLOCKS:
        raise DimensionError(f"{int(stored.sum())} blocks exceed the 32-bit index limit")
    block_row_idx, block_col_idx = np.nonzero(stored)
    indptr = np.zeros(grid_rows + 1, dtype=INDEX_DTYPE)
    np.cumsum(stored.sum(axis=1), out=indptr[1:])
    return BsrMatrix(
        rows=rows,
        cols=cols,
        block_rows=block_rows,
        block_cols=block_cols,
        indptr=indptr,
        indices=block_col_idx.astype(INDEX_DTYPE),
        data=np.ascontiguousarray(blocks[block_row_idx, block_col_idx]),
    )


def bsr_to_dense(m: BsrMatrix) -> np.ndarray:
    """Exact dense reconstruction; unstored blocks are zero."""
    m.validate()
    grid_rows, grid_cols = m.grid
    r, c = m.block_shape
    blocks = np.zeros((grid_rows, grid_cols, r, c))
    counts = np.diff(m.indptr.astype(np.int64))
    block_row_idx = np.repeat(np.arange(grid_rows), counts)
    blocks[block_row_idx, m.indices.astype(np.int64)] = m.data
    dense = blocks.transpose(0, 2, 1, 3).reshape(grid_rows * r, grid_cols * c)
    return dense[: m.rows, : m.cols].copy()


def prune_to_blocks(
    dense: np.ndarray,
    block_rows: int,
    block_cols: int,
    target_block_sparsity: float,
    pad: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Zero the floor(target * blocks) blocks of smallest Frobenius norm.

    Ties go to the earlier block in (block-row, block-col) order. Returns the
    pruned matrix and the boolean mask of kept blocks.
    """
    if not 0.0 <= target_block_sparsity <= 1.0:
        raise ParameterError(f"target sparsity must be in [0, 1], got {target_block_sparsity}")
    dense = np.asarray(dense, dtype=np.float64)
    norms = block_norms(dense, block_rows, block_cols, pad)
    n_drop = int(np.floor(target_block_sparsity * norms.size))
    order = np.argsort(norms.ravel(), kind="stable")
    keep = np.ones(norms.size, dtype=bool)
    keep[order[:n_drop]] = False
    keep = keep.reshape(norms.shape)

    element_mask = np.repeat(np.repeat(keep, block_rows, axis=0), block_cols, axis=1)
    pruned = np.where(element_mask[: dense.shape[0], : dense.shape[1]], dense, 0.0)
    return pruned, keep


def random_block_sparse(
    rows: int,
    cols: int,
    block_rows: int,
    block_cols: int,
    sparsity: float,
    rng: np.random.Generator,
    pad: bool = False,
) -> np.ndarray:
    """Gaussian matrix pruned to the requested block sparsity."""
    pruned, _ = prune_to_blocks(rng.standard_normal((rows, cols)), block_rows, block_cols,
                                sparsity, pad)
    return pruned


# ============================================================================
# KERNELS
# ============================================================================

@njit(cache=True)
def _spmm_reference(indptr, indices, data, r, c, b, out):
    n_cols = b.shape[1]
    for block_row in range(indptr.shape[0] - 1):
        for p in range(indptr[block_row], indptr[block_row + 1]):
            col0 = indices[p] * c
            for i in range(r):
                row = block_row * r + i
                for j in range(c):
                    a = data[p, i, j]
                    for n in range(n_cols):
                        out[row, n] += a * b[col0 + j, n]


@njit(parallel=True, fastmath=True, cache=True)
def _spmm_vectorized(indptr, indices, data, r, c, b, out, tile, grain):
    n_block_rows = indptr.shape[0] - 1
    n_cols = b.shape[1]
    n_chunks = (n_block_rows + grain - 1) // grain
    for chunk in prange(n_chunks):
        start = chunk * grain
        stop = min(start + grain, n_block_rows)
        for t0 in range(0, n_cols, tile):
            t1 = min(t0 + tile, n_cols)
            for block_row in range(start, stop):
                for p in range(indptr[block_row], indptr[block_row + 1]):
                    col0 = indices[p] * c
                    for i in range(r):
                        out_row = out[block_row * r + i]
                        for j in range(c):
                            a = data[p, i, j]
                            b_row = b[col0 + j]
                            for n in range(t0, t1):
                                out_row[n] += a * b_row[n]


@njit(cache=True)
def _dense_reference(a, b, out):
    n_cols = b.shape[1]
    for row in range(a.shape[0]):
        for k in range(a.shape[1]):
            coeff = a[row, k]
            for n in range(n_cols):
                out[row, n] += coeff * b[k, n]


@njit(parallel=True, fastmath=True, cache=True)
def _dense_vectorized(a, b, out, tile, grain):
    n_rows = a.shape[0]
    n_cols = b.shape[1]
    n_chunks = (n_rows + grain - 1) // grain
    for chunk in prange(n_chunks):
        start = chunk * grain
        stop = min(start + grain, n_rows)
        for t0 in range(0, n_cols, tile):
            t1 = min(t0 + tile, n_cols)
            for row in range(start, stop):
                out_row = out[row]
                for k in range(a.shape[1]):
                    coeff = a[row, k]
                    b_row = b[k]
                    for n in range(t0, t1):
                        out_row[n] += coeff * b_row[n]


def default_kernel_config(n_block_rows: int, core_count: Optional[int] = None) -> KernelConfig:
    """Untiled row panels, block-rows split evenly across cores."""
    cores = core_count or os.cpu_count() or 1
    return KernelConfig(tile_cols=0, grain=max(1, n_block_rows // cores))


def _resolve(path: Optional[KernelPath], config: Optional[KernelConfig], n_block_rows: int, n_cols: int):
    path = KernelPath(path) if path is not None else default_kernel_path()
    config = config or default_kernel_config(n_block_rows)
    tile = config.tile_cols if 0 < config.tile_cols < n_cols else max(n_cols, 1)
    return path, tile, config.grain


def spmm(
    a: BsrMatrix,
    b: np.ndarray,
    path: Optional[KernelPath] = None,
    config: Optional[KernelConfig] = None,
) -> np.ndarray:
    """a @ b, touching only stored blocks."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != a.cols:
        raise DimensionError(f"cannot multiply {a.rows}x{a.cols} BSR by operand of shape {b.shape}")
    padded_rows, padded_cols = a.padded_shape
    if padded_cols != a.cols:
        b = np.vstack([b, np.zeros((padded_cols - a.cols, b.shape[1]))])
    b = np.ascontiguousarray(b)
    out = np.zeros((padded_rows, b.shape[1]))
    indptr, indices, data = a._kernel_arrays
    path, tile, grain = _resolve(path, config, a.grid[0], b.shape[1])
    if path is KernelPath.REFERENCE:
        _spmm_reference(indptr, indices, data, a.block_rows, a.block_cols, b, out)
    else:
        _spmm_vectorized(indptr, indices, data, a.block_rows, a.block_cols, b, out, tile, grain)
    return out[: a.rows]


def spmv(
    a: BsrMatrix,
    x: np.ndarray,
    path: Optional[KernelPath] = None,
    config: Optional[KernelConfig] = None,
) -> np.ndarray:
    """a @ x for a vector x."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != a.cols:
        raise DimensionError(f"cannot multiply {a.rows}x{a.cols} BSR by vector of shape {x.shape}")
    return spmm(a, x.reshape(-1, 1), path, config)[:, 0]


def dense_mm(
    a: np.ndarray,
    b: np.ndarray,
    path: Optional[KernelPath] = None,
    config: Optional[KernelConfig] = None,
) -> np.ndarray:
    """Structure-oblivious a @ b: same loop nest, zeros included."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    path, tile, grain = _resolve(path, config, a.shape[0], b.shape[1])
    if path is KernelPath.REFERENCE:
        _dense_reference(a, b, out)
    else:
        _dense_vectorized(a, b, out, tile, grain)
    return out
