"""
Benchmark Handlers

Run the block-shape sweep and render saved sweep reports.
"""

from pathlib import Path
from typing import Dict

from ..bench import SweepReport, report_table, run_sweep
from ..config import RunConfig
from .common import guarded, ok

REPORT_NAME = "sweep.json"
SAMPLES_NAME = "sweep_samples.csv"
SUMMARY_NAME = "sweep_summary.csv"


@guarded
def handle_bench_sweep(args: Dict) -> Dict:
    """Time every (shape, path, mode) cell and write JSON + CSV reports"""

    run: RunConfig = args["config"]
    out_dir = Path(run.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    report = run_sweep(run)
    report.write_json(out_dir / REPORT_NAME)
    (out_dir / SAMPLES_NAME).write_text(report.samples_csv(), encoding="utf-8")
    (out_dir / SUMMARY_NAME).write_text(report.summary_csv(), encoding="utf-8")

    return ok(
        f"Sweep finished: {len(report.cells)} cells",
        report=str(out_dir / REPORT_NAME),
        samples=str(out_dir / SAMPLES_NAME),
        summary=str(out_dir / SUMMARY_NAME),
        notes=report.notes,
        table=report_table(report),
    )


@guarded
def handle_report(args: Dict) -> Dict:
    """Load a sweep.json (--input, or the one under --out) as a table"""

    run: RunConfig = args["config"]
    path = Path(run.input) if run.input else Path(run.out) / REPORT_NAME
    report = SweepReport.read_json(path)
    return ok(
        f"Loaded {len(report.cells)} cells from {path}",
        report=str(path),
        notes=report.notes,
        table=report_table(report),
    )
