"""
Export Handlers

Convert checkpoint tensors to BSR and write them as a PSBR container.
"""

from pathlib import Path
from typing import Dict

import numpy as np

from ..bsr_kernels import bsr_to_dense, dense_to_bsr
from ..config import RunConfig
from ..container import load, save
from ..exceptions import ParameterError, StructuralError
from ..optimizer import is_state_section
from .common import guarded, ok

EXPORT_NAME = "export.psbr"


@guarded
def handle_export_bsr(args: Dict) -> Dict:
    """Export every checkpoint weight (or --tensor) with the run's block shape"""

    run: RunConfig = args["config"]
    if not run.checkpoint:
        raise ParameterError("export-bsr needs --checkpoint")
    checkpoint = load(run.checkpoint)
    weights = [name for name in checkpoint.tensors if not is_state_section(name)]
    names = [run.tensor] if run.tensor else weights
    missing = [name for name in names if name not in checkpoint.tensors]
    if missing:
        raise ParameterError(f"checkpoint has no tensor(s) {missing}; found {weights}")

    dense = {name: checkpoint.dense(name) for name in names}
    exported = {
        name: dense_to_bsr(matrix, run.block_rows, run.block_cols, pad=run.pad)
        for name, matrix in dense.items()
    }
    out_path = Path(run.out) / EXPORT_NAME
    save(out_path, exported, run.to_dict())

    # Verify the written file before reporting success.
    reloaded = load(out_path)
    for name, matrix in dense.items():
        if not np.array_equal(bsr_to_dense(reloaded.tensors[name]), matrix):
            raise StructuralError(f"round-trip mismatch for tensor {name!r}")

    blocks = {name: m.nnz_blocks for name, m in exported.items()}
    return ok(
        f"Exported {len(exported)} tensor(s) with {run.block_rows}x{run.block_cols} blocks",
        path=str(out_path),
        blocks=blocks,
        block_density={name: m.block_density for name, m in exported.items()},
    )
