"""
Block-shape benchmark sweep.

For each (dims, block shape, kernel path, mode) cell the sweep times
``repeats`` multiplications of a pruned d x d weight matrix by a d x batch
activation block. ``sparsity_aware`` runs the BSR kernel with the configuration the
structure cache prepared; ``structure_oblivious`` runs the dense kernel of
the same path on the zero-filled matrix. Both modes of a shape see the same
matrix content, and a shape's speedup is the oblivious median over the
aware median.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numba
import numpy as np
from rich.table import Table

from .bsr_kernels import (
    KernelPath,
    configure_threads,
    dense_mm,
    dense_to_bsr,
    random_block_sparse,
    spmm,
)
from .config import RunConfig
from .exceptions import MeasurementError, ParameterError
from .sched_cache import (
    HardwareProfile,
    OpKind,
    TaskBuffer,
    TaskDescriptor,
    measured_selector,
    schedule,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("sparsity_aware", "structure_oblivious")
MIN_TIMER_TICKS = 100
MIN_REPEATS = 5

SAMPLE_FIELDS = ("dims", "block_rows", "block_cols", "kernel_path", "mode", "run", "wall_ms",
                 "inner_iterations")
SUMMARY_FIELDS = ("dims", "block_rows", "block_cols", "kernel_path", "mode", "runs", "min_ms",
                  "max_ms", "median_ms", "mean_ms", "std_ms", "speedup")


# ============================================================================
# TIMING
# ============================================================================

@dataclass(frozen=True)
class Measurement:
    samples_ms: Tuple[float, ...]
    inner_iterations: int = 1
    dims: int = 0

    @property
    def adjusted(self) -> bool:
        return self.inner_iterations > 1

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def std_ms(self) -> float:
        return statistics.pstdev(self.samples_ms)


def timer_resolution_ns() -> float:
    return time.get_clock_info("perf_counter").resolution * 1e9


def measure(
    fn: Callable[[], Any],
    repeats: int,
    warmup: bool = True,
    min_ticks: int = MIN_TIMER_TICKS,
    resolution_ns: Optional[float] = None,
    clock: Callable[[], int] = time.perf_counter_ns,
) -> Measurement:
    """Time ``repeats`` calls of ``fn`` on a monotonic clock.

    When a run lasts fewer than ``min_ticks`` clock ticks, the inner
    iteration count doubles and the runs are repeated; samples are always
    per-call milliseconds.
    """
    if repeats < 1:
        raise ParameterError(f"repeats must be >= 1, got {repeats}")
    resolution_ns = resolution_ns if resolution_ns is not None else timer_resolution_ns()
    floor_ns = min_ticks * max(resolution_ns, 1.0)
    if warmup:
        fn()

    inner = 1
    while True:
        samples = []
        for _ in range(repeats):
            start = clock()
            for _ in range(inner):
                fn()
            elapsed = clock() - start
            if elapsed < 0:
                raise MeasurementError(f"clock went backwards ({elapsed} ns)")
            samples.append(elapsed)
        if min(samples) >= floor_ns or inner >= 1 << 20:
            break
        inner *= 2
        logger.debug("run shorter than %d timer ticks; inner iterations -> %d", min_ticks, inner)
    return Measurement(tuple(s / inner / 1e6 for s in samples), inner)


def pin_to_core(core: int = 0) -> bool:
    """Pin the process to one core and run kernels single-threaded."""
    if not hasattr(os, "sched_setaffinity"):
        logger.warning("core pinning is not supported on this platform")
        return False
    os.sched_setaffinity(0, {core})
    numba.set_num_threads(1)
    return True


# ============================================================================
# REPORT
# ============================================================================

@dataclass(frozen=True)
class CellStats:
    block_rows: int
    block_cols: int
    kernel_path: str
    mode: str
    samples_ms: Tuple[float, ...]
    inner_iterations: int = 1
    dims: int = 0

    @property
    def runs(self) -> int:
        return len(self.samples_ms)

    @property
    def min_ms(self) -> float:
        return min(self.samples_ms)

    @property
    def max_ms(self) -> float:
        return max(self.samples_ms)

    @property
    def median_ms(self) -> float:
        return statistics.median(self.samples_ms)

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def std_ms(self) -> float:
        return statistics.pstdev(self.samples_ms)

    def summary(self) -> Dict[str, Any]:
        return {
            "dims": self.dims,
            "block_rows": self.block_rows,
            "block_cols": self.block_cols,
            "kernel_path": self.kernel_path,
            "mode": self.mode,
            "runs": self.runs,
            "min_ms": self.min_ms,
            "max_ms": self.max_ms,
            "median_ms": self.median_ms,
            "mean_ms": self.mean_ms,
            "std_ms": self.std_ms,
        }


@dataclass
class SweepReport:
    cells: List[CellStats]
    machine: Dict[str, Any]
    config: Dict[str, Any]
    notes: List[str] = field(default_factory=list)

    def cell(self, shape: Tuple[int, int], path: str, mode: str,
             dims: Optional[int] = None) -> CellStats:
        for c in self.cells:
            if ((c.block_rows, c.block_cols) == tuple(shape) and c.kernel_path == path
                    and c.mode == mode and dims in (None, c.dims)):
                return c
        raise KeyError((shape, path, mode, dims))

    def medians_by_shape(self, path: str, mode: str,
                         dims: Optional[int] = None) -> Dict[Tuple[int, int], float]:
        """Median per block shape; pass ``dims`` when the sweep covered several sizes."""
        return {
            (c.block_rows, c.block_cols): c.median_ms
            for c in self.cells
            if c.kernel_path == path and c.mode == mode and dims in (None, c.dims)
        }

    def speedup(self, cell: CellStats) -> Optional[float]:
        """Oblivious over aware median for the cell's dims, shape and path."""
        shape = (cell.block_rows, cell.block_cols)
        try:
            aware = self.cell(shape, cell.kernel_path, "sparsity_aware", cell.dims)
            oblivious = self.cell(shape, cell.kernel_path, "structure_oblivious", cell.dims)
        except KeyError:
            return None
        if aware.median_ms <= 0:
            return None
        return oblivious.median_ms / aware.median_ms

    def speedups(self) -> List[Dict[str, Any]]:
        rows = []
        for c in self.cells:
            if c.mode != "sparsity_aware":
                continue
            value = self.speedup(c)
            if value is not None:
                rows.append({"dims": c.dims, "block_rows": c.block_rows,
                             "block_cols": c.block_cols, "kernel_path": c.kernel_path,
                             "speedup": value})
        return rows

    def as_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "machine": self.machine,
            "config": self.config,
            "notes": list(self.notes),
            "speedups": self.speedups(),
            "cells": [
                {**c.summary(), "samples_ms": list(c.samples_ms),
                 "inner_iterations": c.inner_iterations}
                for c in self.cells
            ],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "SweepReport":
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise ParameterError(f"unsupported sweep report schema {payload.get('schema_version')!r}")
        cells = [
            CellStats(c["block_rows"], c["block_cols"], c["kernel_path"], c["mode"],
                      tuple(c["samples_ms"]), c.get("inner_iterations", 1), c.get("dims", 0))
            for c in payload["cells"]
        ]
        return cls(cells, payload["machine"], payload["config"], list(payload.get("notes", [])))

    def write_json(self, path: Path) -> Path:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.as_dict(), f, indent=2)
        return path

    @classmethod
    def read_json(cls, path: Path) -> "SweepReport":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def samples_csv(self) -> str:
        rows = [
            {"dims": c.dims, "block_rows": c.block_rows, "block_cols": c.block_cols,
             "kernel_path": c.kernel_path, "mode": c.mode, "run": i, "wall_ms": ms, "inner_iterations": c.inner_iterations}
            for c in self.cells for i, ms in enumerate(c.samples_ms)
        ]
        return write_csv_text("sweep-samples", self.config, SAMPLE_FIELDS, rows)

    def summary_csv(self) -> str:
        return write_csv_text("sweep-summary", self.config, SUMMARY_FIELDS,
                              [{**c.summary(), "speedup": self.speedup(c)} for c in self.cells])


def write_csv_text(schema: str, config: Dict[str, Any], fields: Sequence[str],
                   rows: Iterable[Dict[str, Any]]) -> str:
    """CSV with two leading `#` lines: schema tag and resolved config JSON."""
    buf = io.StringIO()
    buf.write(f"# schema: {schema}/{SCHEMA_VERSION}\n")
    buf.write(f"# config: {json.dumps(config, sort_keys=True)}\n")
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def read_csv_text(text: str) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """Parse a file written by write_csv_text into (header tags, rows)."""
    tags: Dict[str, str] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            tags[key.strip()] = value.strip()
        else:
            body.append(line)
    return tags, list(csv.DictReader(body))


def report_table(report: SweepReport) -> Table:
    table = Table(title=f"Block-shape sweep (dims {report.config.get('dims')}, "
                        f"sparsity {report.config.get('sparsity')})")
    table.add_column("dims", justify="right")
    table.add_column("block", justify="right")
    table.add_column("path")
    table.add_column("mode")
    table.add_column("runs", justify="right")
    for name in ("min", "median", "mean", "max", "std"):
        table.add_column(f"{name} ms", justify="right")
    table.add_column("speedup", justify="right")
    for c in report.cells:
        speedup = report.speedup(c)
        table.add_row(
            str(c.dims), f"{c.block_rows}x{c.block_cols}", c.kernel_path, c.mode, str(c.runs),
            f"{c.min_ms:.3f}", f"{c.median_ms:.3f}", f"{c.mean_ms:.3f}",
            f"{c.max_ms:.3f}", f"{c.std_ms:.3f}",
            "-" if speedup is None else f"{speedup:.2f}x",
        )
    return table


# ============================================================================
# SWEEP
# ============================================================================

def machine_descriptor(profile: HardwareProfile) -> Dict[str, Any]:
    return {
        **profile.describe(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "numba_threads": numba.get_num_threads(),
        "timer_resolution_ns": timer_resolution_ns(),
    }


def cell_seed(master_seed: int, shape: Tuple[int, int], dims: int) -> np.random.SeedSequence:
    """Per-(dims, shape) seed; path and mode are left out so every cell of a shape sees one matrix."""
    return np.random.SeedSequence([master_seed, dims, shape[0], shape[1]])


def run_sweep(config: RunConfig, profile: Optional[HardwareProfile] = None) -> SweepReport:
    shapes = config.shape_list()
    sizes = config.dims_list()
    paths = [KernelPath(p.strip()) for p in config.paths.split(",") if p.strip()]
    modes = [m.strip() for m in config.modes.split(",") if m.strip()]
    unknown = set(modes) - set(MODES)
    if unknown:
        raise ParameterError(f"unknown sweep mode(s): {', '.join(sorted(unknown))}")
    if config.repeats < MIN_REPEATS:
        raise ParameterError(f"repeats must be >= {MIN_REPEATS}, got {config.repeats}")

    if config.pin_core:
        pin_to_core(0)
    threads = configure_threads()
    profile = profile or HardwareProfile.detect()
    logger.info("sweep: %d sizes x %d shapes x %d paths x %d modes, %d threads",
                len(sizes), len(shapes), len(paths), len(modes), threads)

    cells: List[CellStats] = []
    notes: List[str] = []
    for dims, shape in ((d, s) for d in sizes for s in shapes):
        rng = np.random.default_rng(cell_seed(config.seed, shape, dims))
        weights = random_block_sparse(dims, dims, shape[0], shape[1],
                                      config.sparsity, rng, pad=config.pad)
        activations = rng.standard_normal((dims, config.batch))
        bsr = dense_to_bsr(weights, shape[0], shape[1], pad=config.pad)

        for path in paths:
            buffer = TaskBuffer(selector=measured_selector(profile, path=path))
            task = TaskDescriptor.for_matrix(OpKind.SPMM, bsr, activations, profile)
            plan = schedule(buffer.submit(task))
            kernel_config = plan.config_for(task)

            for mode in modes:
                if mode == "sparsity_aware":
                    fn = lambda: spmm(bsr, activations, path, kernel_config)  # noqa: E731
                else:
                    fn = lambda: dense_mm(weights, activations, path)  # noqa: E731
                m = measure(fn, config.repeats)
                if m.adjusted:
                    notes.append(
                        f"d={dims} {shape[0]}x{shape[1]} {path.value} {mode}: below "
                        f"{MIN_TIMER_TICKS} timer ticks per run, timed {m.inner_iterations} "
                        f"iterations per sample"
                    )
                cells.append(CellStats(shape[0], shape[1], path.value, mode,
                                       m.samples_ms, m.inner_iterations, dims))
                logger.info("d=%-5d %4dx%-4d %-10s %-19s median %.3f ms", dims, shape[0],
                            shape[1], path.value, mode, statistics.median(m.samples_ms))

    return SweepReport(cells, machine_descriptor(profile), config.to_dict(), notes)


def interior_minimum(medians: Dict[Tuple[int, int], float]) -> bool:
    """True when the fastest shape is neither the smallest nor the largest."""
    if len(medians) < 3:
        return False
    ordered = sorted(medians, key=lambda s: s[0] * s[1])
    fastest = min(ordered, key=lambda s: medians[s])
    return fastest not in (ordered[0], ordered[-1]) and math.isfinite(medians[fastest])
