"""
Sparse Optimizer CLI - Subcommand Handlers

This package contains all subcommand handler implementations organized by feature domain.
"""

from .train_handlers import (
    handle_train,
)
from .export_handlers import (
    handle_export_bsr,
)
from .infer_handlers import (
    handle_infer,
)
from .bench_handlers import (
    handle_bench_sweep,
    handle_report,
)

__all__ = [
    # Training handlers
    "handle_train",
    # Export handlers
    "handle_export_bsr",
    # Inference handlers
    "handle_infer",
    # Benchmark handlers
    "handle_bench_sweep",
    "handle_report",
]
