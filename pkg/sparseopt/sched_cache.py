"""
Structure-reuse scheduling for sparse kernels.

Tasks are buffered as (operator, structure) descriptors. Tasks whose BSR
structure is identical share one prepared kernel configuration, and the
execution plan places them in consecutive slots. Groups keep the order in
which their structure was first submitted; only groups first seen in the
same submit_batch call are chained so that similar structures (same block
shape, then same dims, then same operator) run next to each other.

A TaskBuffer is not thread-safe. ExecutionPlan and its cache are read-only
once built and may be shared.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .bsr_kernels import (
    BsrMatrix,
    KernelConfig,
    KernelPath,
    default_kernel_config,
    dense_mm,
    spmm,
    spmv,
)
from .exceptions import MeasurementError, ParameterError

logger = logging.getLogger(__name__)

DEFAULT_CACHE_BYTES = 256 * 1024
ISA_FLAGS = ("avx512f", "avx2", "avx", "sse4_2", "neon", "asimd")


class OpKind(str, enum.Enum):
    SPMM = "spmm"
    SPMV = "spmv"
    DENSE_MM = "dense_mm"


# ============================================================================
# HARDWARE PROFILE
# ============================================================================

def _read_cache_bytes() -> int:
    for name in ("SC_LEVEL2_CACHE_SIZE", "SC_LEVEL1_DCACHE_SIZE"):
        try:
            value = os.sysconf(name)
        except (ValueError, OSError, AttributeError):
            continue
        if value and value > 0:
            return int(value)
    return DEFAULT_CACHE_BYTES


def _read_isa_tag() -> str:
    cpuinfo = Path("/proc/cpuinfo")
    try:
        text = cpuinfo.read_text(encoding="utf-8", errors="replace")
    except OSError:
        return platform.machine() or "unknown"
    flags = set()
    for line in text.splitlines():
        if line.startswith(("flags", "Features")):
            flags.update(line.split(":", 1)[1].split())
            break
    for tag in ISA_FLAGS:
        if tag in flags:
            return tag
    return platform.machine() or "unknown"


@dataclass(frozen=True)
class HardwareProfile:
    """Machine description.

    max_mem_per_block and max_threads_per_block are recorded but do not
    influence kernel candidates on CPU.
    """

    core_count: int
    cache_bytes: int
    isa_tag: str = "unknown"
    max_mem_per_block: int = 0
    max_threads_per_block: int = 0

    def __post_init__(self):
        if self.core_count < 1:
            raise ParameterError(f"core_count must be >= 1, got {self.core_count}")
        if self.cache_bytes < 1:
            raise ParameterError(f"cache_bytes must be >= 1, got {self.cache_bytes}")

    @classmethod
    def detect(cls) -> "HardwareProfile":
        cores = os.cpu_count() or 1
        cache = _read_cache_bytes()
        return cls(
            core_count=cores,
            cache_bytes=cache,
            isa_tag=_read_isa_tag(),
            max_mem_per_block=cache,
            max_threads_per_block=1,
        )

    def describe(self) -> Dict[str, Any]:
        return {
            "core_count": self.core_count,
            "cache_bytes": self.cache_bytes,
            "isa_tag": self.isa_tag,
            "max_mem_per_block": self.max_mem_per_block,
            "max_threads_per_block": self.max_threads_per_block,
        }


# ============================================================================
# STRUCTURE KEYS AND TASKS
# ============================================================================

@dataclass(frozen=True, eq=False)
class StructureKey:
    """64-bit digest of (rows, cols, r, c, indptr, indices); values excluded."""

    digest: int
    rows: int
    cols: int
    block_rows: int
    block_cols: int
    canonical: bytes = field(repr=False)

    @classmethod
    def from_parts(cls, rows, cols, block_rows, block_cols, indptr, indices) -> "StructureKey":
        header = np.array([rows, cols, block_rows, block_cols, len(indptr), len(indices)],
                          dtype="<u8").tobytes()
        canonical = (
            header
            + np.ascontiguousarray(indptr, dtype="<u4").tobytes()
            + np.ascontiguousarray(indices, dtype="<u4").tobytes()
        )
        digest = int.from_bytes(hashlib.blake2b(canonical, digest_size=8).digest(), "little")
        return cls(digest, int(rows), int(cols), int(block_rows), int(block_cols), canonical)

    @classmethod
    def of(cls, matrix) -> "StructureKey":
        """Key of a BsrMatrix, or of a dense matrix stored as one block."""
        if isinstance(matrix, BsrMatrix):
            return cls.from_parts(matrix.rows, matrix.cols, matrix.block_rows,
                                  matrix.block_cols, matrix.indptr, matrix.indices)
        rows, cols = np.shape(matrix)
        return cls.from_parts(rows, cols, rows, cols, [0, 1], [0])

    @property
    def block_shape(self) -> Tuple[int, int]:
        return (self.block_rows, self.block_cols)

    @property
    def dims(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def hex(self) -> str:
        return f"{self.digest:016x}"

    def __eq__(self, other):
        if not isinstance(other, StructureKey):
            return NotImplemented
        return self.digest == other.digest and self.canonical == other.canonical

    def __hash__(self):
        return hash(self.digest)


@dataclass(frozen=True)
class TaskDescriptor:
    op_kind: OpKind
    structure_key: StructureKey
    operand_shapes: Tuple[Tuple[int, ...], ...]
    hardware_profile: HardwareProfile
    matrix: Any = field(default=None, compare=False, repr=False)
    operand: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @classmethod
    def for_matrix(
        cls,
        op_kind: OpKind,
        matrix,
        operand: np.ndarray,
        hardware_profile: HardwareProfile,
    ) -> "TaskDescriptor":
        op_kind = OpKind(op_kind)
        if op_kind is OpKind.DENSE_MM and isinstance(matrix, BsrMatrix):
            raise ParameterError("dense_mm tasks take a dense matrix")
        if op_kind is not OpKind.DENSE_MM and not isinstance(matrix, BsrMatrix):
            raise ParameterError(f"{op_kind.value} tasks take a BsrMatrix")
        shapes = (tuple(matrix.shape), tuple(np.shape(operand)))
        return cls(op_kind, StructureKey.of(matrix), shapes, hardware_profile, matrix, operand)


def similarity(a: TaskDescriptor, b: TaskDescriptor) -> Tuple[bool, bool, bool]:
    """Lexicographic similarity: shared block shape > shared dims > same operator."""
    return (
        a.structure_key.block_shape == b.structure_key.block_shape,
        a.structure_key.dims == b.structure_key.dims,
        a.op_kind == b.op_kind,
    )


Similarity = Callable[[TaskDescriptor, TaskDescriptor], Tuple]
ConfigSelector = Callable[[TaskDescriptor], KernelConfig]


def default_selector(task: TaskDescriptor) -> KernelConfig:
    block_rows = -(-task.structure_key.rows // max(task.structure_key.block_rows, 1))
    return default_kernel_config(max(block_rows, 1), task.hardware_profile.core_count)


# ============================================================================
# TASK BUFFER
# ============================================================================

class TaskBuffer:
    """Ordered task list plus one prepared config per distinct structure.

    ``batches[i]`` is the submission batch of ``tasks[i]``; each plain
    :meth:`submit` is a batch of its own.
    """

    def __init__(self, selector: Optional[ConfigSelector] = None):
        self.selector = selector or default_selector
        self.tasks: List[TaskDescriptor] = []
        self.batches: List[int] = []
        self.cache: Dict[StructureKey, KernelConfig] = {}
        self._next_batch = 0

    def __len__(self) -> int:
        return len(self.tasks)

    def submit(self, task: TaskDescriptor) -> "TaskBuffer":
        return self.submit_batch([task])

    def submit_batch(self, tasks: Sequence[TaskDescriptor]) -> "TaskBuffer":
        """Submit tasks together; the scheduler may reorder structures new in this batch."""
        batch = self._next_batch
        self._next_batch += 1
        for task in tasks:
            self.tasks.append(task)
            self.batches.append(batch)
            if task.structure_key not in self.cache:
                self.cache[task.structure_key] = self.selector(task)
                logger.debug("prepared %s for structure %s", self.cache[task.structure_key],
                             task.structure_key.hex)
        return self


def submit(task: TaskDescriptor, buffer: TaskBuffer) -> TaskBuffer:
    return buffer.submit(task)


@dataclass(frozen=True)
class ExecutionPlan:
    tasks: Tuple[TaskDescriptor, ...]
    cache: Mapping[StructureKey, KernelConfig]

    def config_for(self, task: TaskDescriptor) -> KernelConfig:
        return self.cache[task.structure_key]

    def run(self, path: Optional[KernelPath] = None) -> List[np.ndarray]:
        """Execute every task in plan order with its cached configuration."""
        outputs = []
        for task in self.tasks:
            if task.matrix is None or task.operand is None:
                raise ParameterError(f"task {task.structure_key.hex} carries no operands")
            config = self.config_for(task)
            if task.op_kind is OpKind.SPMM:
                outputs.append(spmm(task.matrix, task.operand, path, config))
            elif task.op_kind is OpKind.SPMV:
                outputs.append(spmv(task.matrix, task.operand, path, config))
            else:
                outputs.append(dense_mm(task.matrix, task.operand, path, config))
        return outputs

    def dump(self) -> str:
        lines = [f"plan: {len(self.tasks)} tasks, {len(self.cache)} structures"]
        for slot, task in enumerate(self.tasks):
            key = task.structure_key
            config = self.config_for(task)
            lines.append(
                f"  {slot:4d}  {task.op_kind.value:<8s}  key={key.hex}  "
                f"{key.rows}x{key.cols}  block={key.block_rows}x{key.block_cols}  "
                f"tile={config.tile_cols} grain={config.grain}"
            )
        lines.append("cache:")
        for key, config in self.cache.items():
            lines.append(f"  key={key.hex}  tile={config.tile_cols} grain={config.grain}")
        return "\n".join(lines)


def schedule(buffer: TaskBuffer, similarity_fn: Similarity = similarity) -> ExecutionPlan:
    """Group tasks by structure, then chain groups by similarity inside a batch.

    Within a group tasks keep submission order. Groups first seen in
    different batches keep their submission order. Among groups first seen
    in one batch, the earliest comes first and each following group is the
    most similar remaining one to the group just placed, earliest-submitted
    on ties.
    """
    groups: Dict[StructureKey, List[TaskDescriptor]] = {}
    first_batch: Dict[StructureKey, int] = {}
    for task, batch in zip(buffer.tasks, buffer.batches):
        groups.setdefault(task.structure_key, []).append(task)
        first_batch.setdefault(task.structure_key, batch)

    by_batch: Dict[int, List[List[TaskDescriptor]]] = {}
    for key, group in groups.items():
        by_batch.setdefault(first_batch[key], []).append(group)

    ordered: List[TaskDescriptor] = []
    for batch in sorted(by_batch):
        remaining = by_batch[batch]
        ordered.extend(remaining.pop(0))
        while remaining:
            last = ordered[-1]
            scores = [similarity_fn(last, group[0]) for group in remaining]
            pick = scores.index(max(scores))
            ordered.extend(remaining.pop(pick))
    return ExecutionPlan(tuple(ordered), MappingProxyType(dict(buffer.cache)))


# ============================================================================
# KERNEL CONFIG SELECTION
# ============================================================================

def candidate_configs(structure: BsrMatrix, profile: HardwareProfile) -> Tuple[KernelConfig, ...]:
    """Fixed candidate order; only core count and cache size shape the set."""
    n_block_rows = max(structure.grid[0], 1)
    panel_bytes = 8 * (structure.block_rows + structure.block_cols)
    cache_tile = max(8, 1 << max(0, (profile.cache_bytes // panel_bytes).bit_length() - 1))
    tiles = (0, cache_tile)
    grains = (
        max(1, n_block_rows // profile.core_count),
        max(1, n_block_rows // (4 * profile.core_count)),
        1,
    )
    seen = []
    for tile in tiles:
        for grain in grains:
            config = KernelConfig(tile_cols=tile, grain=grain)
            if config not in seen:
                seen.append(config)
    return tuple(seen)


def _median_runtime(run: Callable[[], Any], trials: int, timer: Callable[[], float]) -> float:
    samples = []
    for _ in range(trials):
        start = timer()
        run()
        elapsed = timer() - start
        if not np.isfinite(elapsed) or elapsed < 0:
            raise MeasurementError(f"timer returned {elapsed!r}")
        samples.append(elapsed)
    return statistics.median(samples)


def select_kernel_config(
    structure: BsrMatrix,
    profile: HardwareProfile,
    operand: Optional[np.ndarray] = None,
    candidates: Optional[Sequence[KernelConfig]] = None,
    trials: int = 3,
    noise_tolerance: float = 0.02,
    path: Optional[KernelPath] = None,
    timer: Callable[[], float] = time.perf_counter,
) -> KernelConfig:
    """Pick the candidate with the lowest median runtime over ``trials`` runs.

    Candidates within ``noise_tolerance`` (relative) of the best median tie,
    and the earliest tied candidate wins. Any measurement failure falls back
    to ``default_kernel_config``.
    """
    candidates = tuple(candidates or candidate_configs(structure, profile))
    fallback = default_kernel_config(max(structure.grid[0], 1), profile.core_count)
    if not candidates:
        return fallback
    if len(candidates) == 1:
        return candidates[0]
    if operand is None:
        operand = np.ones((structure.cols, 64))

    try:
        medians = []
        for config in candidates:
            medians.append(_median_runtime(
                lambda config=config: spmm(structure, operand, path, config), trials, timer,
            ))
    except (MeasurementError, OSError, RuntimeError) as e:
        logger.warning("kernel config measurement failed (%s); using default %s", e, fallback)
        return fallback

    floor = min(medians)
    bound = floor * (1.0 + noise_tolerance)
    chosen = next(c for c, m in zip(candidates, medians) if m <= bound)
    logger.debug("selected %s from %d candidates (medians %s)", chosen, len(candidates), medians)
    return chosen


def measured_selector(
    profile: HardwareProfile,
    trials: int = 3,
    path: Optional[KernelPath] = None,
) -> ConfigSelector:
    """A TaskBuffer selector that measures candidates for BSR tasks."""

    def select(task: TaskDescriptor) -> KernelConfig:
        if isinstance(task.matrix, BsrMatrix):
            operand = task.operand
            if operand is not None and np.ndim(operand) == 1:
                operand = np.reshape(operand, (-1, 1))
            return select_kernel_config(task.matrix, profile, operand, trials=trials, path=path)
        return default_selector(task)

    return select
