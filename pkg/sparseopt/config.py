"""
Run configuration.

A RunConfig is resolved from three layers, later layers winning:
problem preset -> `key = value` config file -> command-line flags.
The resolved record is embedded (as JSON) in every artifact a run writes.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .exceptions import ParameterError

logger = logging.getLogger(__name__)

THREADS_ENV = "PSBR_THREADS"
KERNEL_PATH_ENV = "PSBR_KERNEL_PATH"

SWEEP_SHAPES = (1, 2, 4, 8, 16, 32, 64, 128, 256)

# Preset hyperparameters per toy problem. Both presets depart from the
# optimizer defaults (epsilon_adam 1e-6, alpha 0.001, beta2 0.999): with
# epsilon_adam = 1.0 the Adam step is close to a momentum step, and the prox
# fixed point becomes a lasso solution with weight 1/(mu - 1) (see
# toy_models.equivalent_l1_weight). Reweighting is off so that equivalence
# holds; turn it on with `reweight = true` or --reweight.
PRESETS: Dict[str, Dict[str, Any]] = {
    "lasso": {
        "steps": 500,
        "alpha": 0.5,
        "beta2": 0.99,
        "epsilon_adam": 1.0,
        "mu": 11.0,
        "reweight_every": 150,
        "reweight": False,
    },
    "tinynet": {
        "steps": 2000,
        "alpha": 0.5,
        "beta2": 0.99,
        "epsilon_adam": 1.0,
        "mu": 51.0,
        "reweight_every": 500,
        "reweight": False,
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Every knob a CLI subcommand can read."""

    problem: str = "lasso"
    seed: int = 0
    steps: int = 500
    out: str = "out"
    checkpoint: str = ""
    input: str = ""
    bsr: str = ""
    tensor: str = ""
    resume: str = ""

    # lasso problem
    n: int = 50
    d: int = 20
    s: int = 5
    noise_std: float = 0.01

    # tinynet problem
    d_in: int = 20
    hidden: int = 16
    classes: int = 3
    informative: int = 4
    n_train: int = 1000
    n_test: int = 2000

    # optimizer
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-6
    weight_decay: float = 0.0
    schedule: str = "constant"
    prox_enabled: bool = True
    mu: float = 1.0
    prox_lambda: Optional[float] = None
    schedule_prox: bool = True
    threshold_convention: str = "paper"
    epsilon_gamma: float = 1e-4
    ell_max: int = 1
    reweight: bool = True
    reweight_every: int = 100
    block_rows: int = 1
    block_cols: int = 1
    pad: bool = False
    plateau: bool = False

    # benchmark sweep
    dims: str = "1024"
    batch: int = 256
    sparsity: float = 0.9
    shapes: str = ",".join(str(n) for n in SWEEP_SHAPES)
    transpose_blocks: bool = False
    repeats: int = 5
    paths: str = "reference,vectorized"
    modes: str = "sparsity_aware,structure_oblivious"
    pin_core: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.repeats < 5:
            raise ParameterError(f"repeats must be >= 5, got {self.repeats}")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ParameterError(f"sparsity must be in [0, 1], got {self.sparsity}")
        if self.block_rows < 1 or self.block_cols < 1:
            raise ParameterError(
                f"block shape must be positive, got {self.block_rows}x{self.block_cols}"
            )
        if not self.dims_list() or min(self.dims_list()) < 1:
            raise ParameterError(f"dims must be positive sizes, got {self.dims!r}")
        if self.problem not in PRESETS:
            raise ParameterError(
                f"unknown problem {self.problem!r}; expected one of {sorted(PRESETS)}"
            )

    @property
    def block_shape(self) -> Tuple[int, int]:
        return (self.block_rows, self.block_cols)

    def dims_list(self) -> Tuple[int, ...]:
        """Sweep matrix sizes; `--dims 512,1024` runs both."""
        try:
            return tuple(int(tok) for tok in str(self.dims).split(",") if tok.strip())
        except ValueError as e:
            raise ParameterError(f"dims must be comma-separated integers, got {self.dims!r}") from e

    def shape_list(self) -> Tuple[Tuple[int, int], ...]:
        """Sweep block shapes as (rows, cols) pairs, n x 1 unless transposed."""
        ns = [int(tok) for tok in self.shapes.split(",") if tok.strip()]
        if self.transpose_blocks:
            return tuple((1, n) for n in ns)
        return tuple((n, 1) for n in ns)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def parse_block_shape(text: str) -> Tuple[int, int]:
    """Parse an `NxM` flag value."""
    try:
        rows, cols = text.lower().split("x")
        return int(rows), int(cols)
    except ValueError as e:
        raise ParameterError(f"block shape must look like NxM, got {text!r}") from e


def load_config_file(path: str) -> Dict[str, str]:
    """Read a `key = value` file; `#` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _coerce(name: str, hint: Any, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        if value.lower() in ("", "none", "null"):
            return None
        hint = next(arg for arg in typing.get_args(hint) if arg is not type(None))
    try:
        if hint is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
    except ValueError as e:
        raise ParameterError(f"invalid value for {name}: {value!r}") from e
    return value


def resolve_run_config(
    file_values: Optional[Mapping[str, Any]] = None,
    flag_values: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge preset, config-file and flag layers into a validated RunConfig."""
    hints = typing.get_type_hints(RunConfig)
    file_values = dict(file_values or {})
    flag_values = {k: v for k, v in (flag_values or {}).items() if v is not None}

    unknown = (set(file_values) | set(flag_values)) - set(hints)
    if unknown:
        raise ParameterError(f"unknown config key(s): {', '.join(sorted(unknown))}")

    problem = flag_values.get("problem", file_values.get("problem", RunConfig.problem))
    if problem not in PRESETS:
        raise ParameterError(f"unknown problem {problem!r}; expected one of {sorted(PRESETS)}")

    merged: Dict[str, Any] = dict(PRESETS[problem])
    merged.update(file_values)
    merged.update(flag_values)
    coerced = {name: _coerce(name, hints[name], value) for name, value in merged.items()}
    logger.debug("resolved config layers: preset=%s file=%s flags=%s",
                 problem, sorted(file_values), sorted(flag_values))
    return RunConfig(**coerced)


def env_threads() -> Optional[int]:
    """Thread cap from PSBR_THREADS, or None when unset."""
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        threads = int(raw)
    except ValueError:
        logger.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return None
    return max(1, threads)
