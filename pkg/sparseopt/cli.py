#!/usr/bin/env python3
"""
Sparse Optimizer CLI

Train sparse toy models and benchmark block-sparse kernels.

Subcommands:
- train:       Train lasso / TinyNet with SparseOptimizer
- export-bsr:  Convert a checkpoint to Block Sparse Row tensors
- infer:       Run an exported weight on an input block, timed
- bench-sweep: Time BSR vs dense kernels across block shapes
- report:      Pretty-print a saved sweep report

Exit codes: 0 success, 1 usage / IO / structural error, 2 numerical divergence.

ENVIRONMENT:
- PSBR_THREADS      caps kernel parallelism
- PSBR_KERNEL_PATH  forces the `reference` or `vectorized` kernel path
"""

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

from rich.console import Console
from rich.logging import RichHandler

from .config import load_config_file, parse_block_shape, resolve_run_config
from .exceptions import SparseOptError
from .handlers import (
    # Training handlers
    handle_train,

    # Export handlers
    handle_export_bsr,

    # Inference handlers
    handle_infer,

    # Benchmark handlers
    handle_bench_sweep,
    handle_report,
)

console = Console()
logger = logging.getLogger("sparseopt")


class UsageExitParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        console.print(f"[red]✗ {self.prog}: {message}[/red]")
        sys.exit(1)


# ============================================================================
# ARGUMENTS
# ============================================================================

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file; flags override it")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--block-shape", help="block shape as NxM (rows x cols)")
    parser.add_argument("--pad", action="store_true", default=None,
                        help="zero-pad matrices that are not block multiples")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageExitParser(prog="sparseopt", description=__doc__.split("\n\n")[1])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageExitParser)

    train = sub.add_parser("train", help="train a toy problem")
    _common(train)
    train.add_argument("--problem", choices=["lasso", "tinynet"])
    train.add_argument("--steps", type=int)
    train.add_argument("--alpha", type=float)
    train.add_argument("--mu", type=float)
    train.add_argument("--lambda", dest="prox_lambda", type=float,
                       help="fixed prox scale (default: tied to the step size)")
    train.add_argument("--ell-max", type=int)
    train.add_argument("--reweight", action=argparse.BooleanOptionalAction, default=None,
                       help="refresh gamma from the weights (presets: off)")
    train.add_argument("--reweight-every", type=int)
    train.add_argument("--schedule", choices=["constant", "linear_decay", "cosine"])
    train.add_argument("--schedule-prox", action=argparse.BooleanOptionalAction, default=None,
                       help="scale the prox threshold by the schedule multiplier")
    train.add_argument("--convention", dest="threshold_convention", choices=["paper", "textbook"])
    train.add_argument("--no-prox", dest="prox_enabled", action="store_false", default=None)
    train.add_argument("--plateau", action="store_true", default=None,
                       help="stop early once the objective plateaus")
    train.add_argument("--resume", help="continue from a checkpoint written by train; --steps is the total")

    export = sub.add_parser("export-bsr", help="export checkpoint tensors to BSR")
    _common(export)
    export.add_argument("--checkpoint", required=True)
    export.add_argument("--tensor", help="export only this tensor")

    infer = sub.add_parser("infer", help="multiply a BSR weight by an input")
    _common(infer)
    infer.add_argument("--bsr", required=True)
    infer.add_argument("--input", required=True, help=".npy file or PSBR container")
    infer.add_argument("--tensor", help="weight tensor to use")

    sweep = sub.add_parser("bench-sweep", help="block-shape kernel sweep")
    _common(sweep)
    sweep.add_argument("--dims", help="comma-separated matrix sizes")
    sweep.add_argument("--batch", type=int)
    sweep.add_argument("--sparsity", type=float)
    sweep.add_argument("--shapes", help="comma-separated n values for n x 1 blocks")
    sweep.add_argument("--transpose-blocks", action="store_true", default=None,
                       help="use 1 x n blocks instead of n x 1")
    sweep.add_argument("--repeats", type=int)
    sweep.add_argument("--paths", help="comma-separated kernel paths")
    sweep.add_argument("--modes", help="comma-separated modes")
    sweep.add_argument("--pin-core", action="store_true", default=None)

    report = sub.add_parser("report", help="pretty-print a sweep report")
    _common(report)
    report.add_argument("--input", help="sweep.json path (default: <out>/sweep.json)")

    return parser


def flag_values(args: argparse.Namespace) -> Dict:
    values = {
        k: v for k, v in vars(args).items()
        if k not in ("command", "config", "verbose", "block_shape")
    }
    if args.block_shape:
        values["block_rows"], values["block_cols"] = parse_block_shape(args.block_shape)
    return values


# ============================================================================
# OUTPUT
# ============================================================================

def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), rich_tracebacks=True)],
        force=True,
    )
    logging.getLogger("numba").setLevel(logging.WARNING)


def print_result(command: str, result: Dict) -> None:
    if result["exit_code"] != 0:
        console.print(f"[red]✗ {command} failed: {result['message']}[/red]")
        return
    if command == "infer":
        # mean_ms / std_ms over the five timed runs
        console.print(result["message"])
    else:
        console.print(f"[green]✓ {result['message']}[/green]")
    for key in ("checkpoint", "trajectory", "path", "report", "samples", "summary"):
        if isinstance(result.get(key), str):
            console.print(f"  {key}: {result[key]}")
    if isinstance(result.get("summary"), dict):
        for key, value in result["summary"].items():
            console.print(f"  {key}: {value}")
    for note in result.get("notes", []):
        console.print(f"[yellow]⚠ {note}[/yellow]")
    if "table" in result:
        console.print(result["table"])


HANDLERS: Dict[str, Callable[[Dict], Dict]] = {
    "train": handle_train,
    "export-bsr": handle_export_bsr,
    "infer": handle_infer,
    "bench-sweep": handle_bench_sweep,
    "report": handle_report,
}


# ============================================================================
# ENTRY POINT
# ============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)

    try:
        file_values = load_config_file(args.config) if args.config else {}
        config = resolve_run_config(file_values, flag_values(args))
    except (SparseOptError, OSError) as e:
        console.print(f"[red]✗ invalid configuration: {e}[/red]")
        return 1

    console.print("=" * 80)
    console.print(f"sparseopt {args.command}  (problem={config.problem}, seed={config.seed})")
    console.print("=" * 80)
    result = HANDLERS[args.command]({"config": config})
    print_result(args.command, result)
    return result["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
