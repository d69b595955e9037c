"""
Inference Handlers

Multiply an exported BSR weight by an input block and time it.
"""

from pathlib import Path
from typing import Dict

import numpy as np

from ..bench import measure
from ..bsr_kernels import spmm, spmv
from ..config import RunConfig
from ..container import load, save
from ..exceptions import DimensionError, ParameterError
from .common import guarded, ok

ACTIVATIONS_NAME = "activations.psbr"
INFER_RUNS = 5


def load_input(path: str, tensor: str = "") -> np.ndarray:
    """Read a .npy array, or a tensor from a PSBR container."""
    if Path(path).suffix == ".npy":
        return np.load(path, allow_pickle=False).astype(np.float64)
    container = load(path)
    if tensor and tensor in container.tensors:
        return container.dense(tensor)
    if len(container.tensors) != 1:
        raise ParameterError(f"{path} holds {len(container.tensors)} tensors; pick one with --tensor")
    return container.dense(next(iter(container.tensors)))


@guarded
def handle_infer(args: Dict) -> Dict:
    """Run the BSR weight on the input; report mean/std ms over five runs"""

    run: RunConfig = args["config"]
    if not run.bsr or not run.input:
        raise ParameterError("infer needs --bsr and --input")
    weights = load(run.bsr)
    if run.tensor:
        if run.tensor not in weights.tensors:
            raise ParameterError(f"{run.bsr} has no tensor {run.tensor!r}")
        name = run.tensor
    elif len(weights.tensors) == 1:
        name = next(iter(weights.tensors))
    else:
        raise ParameterError(f"{run.bsr} holds {len(weights.tensors)} tensors; pick one with --tensor")
    matrix = weights.tensors[name]

    x = load_input(run.input)
    if x.ndim not in (1, 2) or x.shape[0] != matrix.cols:
        raise DimensionError(
            f"weight {name!r} is {matrix.rows}x{matrix.cols} but input has shape {x.shape}"
        )
    kernel = (lambda: spmv(matrix, x)) if x.ndim == 1 else (lambda: spmm(matrix, x))
    output = kernel()
    timing = measure(kernel, INFER_RUNS)

    out_path = save(Path(run.out) / ACTIVATIONS_NAME, {"output": output}, run.to_dict())
    return ok(
        f"{timing.mean_ms:.2f} / {timing.std_ms:.2f}",
        path=str(out_path),
        tensor=name,
        output_shape=list(output.shape),
        samples_ms=list(timing.samples_ms),
        mean_ms=timing.mean_ms,
        std_ms=timing.std_ms,
    )
