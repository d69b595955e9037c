"""
SparseOptimizer: AdamW with a proximal shrinkage step.

Per step and per tensor:

    m = beta1*m + (1-beta1)*g
    v = beta2*v + (1-beta2)*g**2
    m_hat, v_hat = bias corrected moments
    eta = schedule multiplier for step k
    z = w - eta*(alpha*m_hat/(sqrt(v_hat)+eps) + weight_decay*w)
    w = shrink(z)                      (eligible tensors only)

Gamma is refreshed from the new weights every ``reweight_every`` steps
until ``ell_max`` reweights have happened, unless ``reweight`` is off.
Gradients always come from the caller.
"""

from __future__ import annotations

import fnmatch
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Literal, Mapping, Optional, Tuple

import numpy as np

from .exceptions import DimensionError, NonFiniteGradientError, ParameterError, StructuralError
from .prox_core import (
    GammaState,
    ProxConfig,
    block_norms,
    initial_gamma,
    penalty_value,
    reweight_gamma,
    shrink,
)

logger = logging.getLogger(__name__)

Schedule = Literal["constant", "linear_decay", "cosine"]
SCHEDULES = ("constant", "linear_decay", "cosine")
SCHEDULE_FLOOR = 0.01

DEFAULT_EXEMPT_PATTERNS = ("*bias*", "*norm*", "b[0-9]*")


@dataclass
class WeightTensor:
    """A named dense parameter array."""

    name: str
    data: np.ndarray

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def copy(self) -> "WeightTensor":
        return WeightTensor(self.name, self.data.copy())


@dataclass(frozen=True)
class OptimizerConfig:
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-6
    weight_decay: float = 0.0
    schedule: Schedule = "constant"
    total_steps: int = 1000
    prox: Optional[ProxConfig] = field(default_factory=ProxConfig)
    prox_allowlist: Optional[Tuple[str, ...]] = None
    exempt_patterns: Tuple[str, ...] = DEFAULT_EXEMPT_PATTERNS

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 < self.beta1 < 1.0:
            raise ParameterError(f"beta1 must be in (0, 1), got {self.beta1}")
        if not 0.0 < self.beta2 < 1.0:
            raise ParameterError(f"beta2 must be in (0, 1), got {self.beta2}")
        if not self.epsilon_adam > 0:
            raise ParameterError(f"epsilon_adam must be > 0, got {self.epsilon_adam}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")

    def shrinks(self, name: str, data: np.ndarray) -> bool:
        """Whether the prox applies to the tensor called ``name``."""
        if self.prox is None:
            return False
        if self.prox_allowlist is not None:
            return any(fnmatch.fnmatchcase(name, pat) for pat in self.prox_allowlist)
        if data.ndim != 2:
            return False
        return not any(fnmatch.fnmatchcase(name, pat) for pat in self.exempt_patterns)


@dataclass
class TensorState:
    m: np.ndarray
    v: np.ndarray
    gamma: Optional[GammaState] = None


@dataclass
class OptimizerState:
    k: int = 0
    tensors: Dict[str, TensorState] = field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            k=self.k,
            tensors={
                name: TensorState(ts.m.copy(), ts.v.copy(), ts.gamma)
                for name, ts in self.tensors.items()
            },
        )


def set_schedule_multiplier(k: int, schedule: Schedule = "constant", total_steps: int = 1) -> float:
    """eta_k for step ``k`` (1-based); decaying schedules bottom out at 0.01."""
    if k < 1:
        raise ParameterError(f"schedule step must be >= 1, got {k}")
    if schedule == "constant":
        return 1.0
    progress = min(k / total_steps, 1.0)
    if schedule == "linear_decay":
        return max(1.0 - progress, SCHEDULE_FLOOR)
    if schedule == "cosine":
        return SCHEDULE_FLOOR + (1.0 - SCHEDULE_FLOOR) * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise ParameterError(f"unknown schedule {schedule!r}")


def prox_lambda(eta: float, config: OptimizerConfig) -> float:
    """Prox scale for the current step."""
    prox = config.prox
    if prox.tie_lambda_to_step:
        return eta * config.alpha if prox.schedule_prox else config.alpha
    if prox.schedule_prox:
        return eta * prox.lambda_
    return prox.lambda_


def init_state(params: Mapping[str, WeightTensor], config: OptimizerConfig) -> OptimizerState:
    """Zero moments and uniform gamma for every tensor."""
    state = OptimizerState()
    for name, tensor in params.items():
        gamma = None
        if config.shrinks(name, tensor.data):
            gamma = initial_gamma(tensor.shape, config.prox)
        state.tensors[name] = TensorState(
            m=np.zeros(tensor.shape), v=np.zeros(tensor.shape), gamma=gamma
        )
    return state


def _check_inputs(
    params: Mapping[str, WeightTensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> None:
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise DimensionError(f"params and grads differ in tensor names: {missing}")
    for name, tensor in params.items():
        if np.shape(grads[name]) != tensor.shape:
            raise DimensionError(
                f"gradient for {name!r} has shape {np.shape(grads[name])}, "
                f"expected {tensor.shape}"
            )
        if name not in state.tensors:
            raise DimensionError(f"no optimizer state for tensor {name!r}")
    bad = [name for name in params if not np.all(np.isfinite(grads[name]))]
    if bad:
        raise NonFiniteGradientError(bad, state.k + 1)


def _update_tensor(
    w: np.ndarray,
    g: np.ndarray,
    ts: TensorState,
    k: int,
    eta: float,
    config: OptimizerConfig,
) -> Tuple[np.ndarray, TensorState]:
    m = config.beta1 * ts.m + (1.0 - config.beta1) * g
    v = config.beta2 * ts.v + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1 ** k)
    v_hat = v / (1.0 - config.beta2 ** k)
    z = w - eta * (config.alpha * m_hat / (np.sqrt(v_hat) + config.epsilon_adam)
                   + config.weight_decay * w)

    gamma = ts.gamma
    if gamma is None:
        return z, TensorState(m, v, None)

    prox = config.prox
    w_new = shrink(z, gamma.gamma, prox_lambda(eta, config), prox)
    if prox.reweight and k % prox.reweight_every == 0 and gamma.ell < prox.ell_max:
        gamma = reweight_gamma(w_new, prox.epsilon_gamma, prox.mode, prox.block_shape,
                               gamma, prox.pad)
    return w_new, TensorState(m, v, gamma)


def step(
    params: Mapping[str, WeightTensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    config: OptimizerConfig,
) -> Tuple[Dict[str, WeightTensor], OptimizerState]:
    """One SparseOptimizer step; returns new params and state, inputs untouched.

    A non-finite gradient rejects the whole step before anything changes.
    """
    _check_inputs(params, grads, state)
    k = state.k + 1
    eta = set_schedule_multiplier(k, config.schedule, config.total_steps)

    new_params: Dict[str, WeightTensor] = {}
    new_state = OptimizerState(k=k)
    # sorted order keeps trajectories bitwise reproducible
    for name in sorted(params):
        g = np.asarray(grads[name], dtype=np.float64)
        w_new, ts = _update_tensor(params[name].data, g, state.tensors[name], k, eta, config)
        new_params[name] = WeightTensor(name, w_new)
        new_state.tensors[name] = ts
        if ts.gamma is not None and ts.gamma is not state.tensors[name].gamma:
            logger.debug("reweighted %s at step %d (ell=%d)", name, k, ts.gamma.ell)
    return new_params, new_state


class SparseOptimizer:
    """Stateful wrapper around :func:`step`."""

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        config: OptimizerConfig,
        state: Optional[OptimizerState] = None,
    ):
        self.config = config
        self.params: Dict[str, WeightTensor] = {
            name: WeightTensor(name, np.array(data, dtype=np.float64))
            for name, data in params.items()
        }
        self.state = state.copy() if state is not None else init_state(self.params, config)
        if set(self.state.tensors) != set(self.params):
            raise DimensionError(
                f"state covers {sorted(self.state.tensors)}, params are {sorted(self.params)}"
            )
        shrunk = [name for name in sorted(self.params) if self.state.tensors[name].gamma is not None]
        logger.info(
            "SparseOptimizer: alpha=%g beta1=%g beta2=%g eps=%g decay=%g schedule=%s prox=%s on %s",
            config.alpha, config.beta1, config.beta2, config.epsilon_adam,
            config.weight_decay, config.schedule,
            "off" if config.prox is None else config.prox.threshold_convention,
            shrunk or "no tensors",
        )

    @property
    def k(self) -> int:
        return self.state.k

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        self.params, self.state = step(self.params, grads, self.state, self.config)
        return self.arrays()

    def penalty(self) -> float:
        """Current sparsity penalty summed over shrunk tensors."""
        prox = self.config.prox
        if prox is None:
            return 0.0
        total = 0.0
        for name in sorted(self.params):
            ts = self.state.tensors[name]
            if ts.gamma is None:
                continue
            total += penalty_value(self.params[name].data, ts.gamma.gamma, prox.mu,
                                   prox.mode, prox.block_shape, prox.pad)
        return total


STATE_PREFIX = "state/"


def is_state_section(name: str) -> bool:
    return name.startswith(STATE_PREFIX)


def state_sections(state: OptimizerState) -> Dict[str, np.ndarray]:
    """Flatten optimizer state into named arrays for a checkpoint.

    ``state/k`` holds the step; each tensor gets ``state/<name>/m`` and
    ``/v``, plus ``/gamma`` and ``/ell`` when it is shrunk.
    """
    sections = {f"{STATE_PREFIX}k": np.array([[float(state.k)]])}
    for name in sorted(state.tensors):
        ts = state.tensors[name]
        base = f"{STATE_PREFIX}{name}/"
        sections[base + "m"] = ts.m
        sections[base + "v"] = ts.v
        if ts.gamma is not None:
            sections[base + "gamma"] = ts.gamma.gamma
            sections[base + "ell"] = np.array([[float(ts.gamma.ell)]])
    return sections


def restore_state(
    sections: Mapping[str, np.ndarray],
    params: Mapping[str, np.ndarray],
    config: OptimizerConfig,
) -> OptimizerState:
    """Rebuild OptimizerState from :func:`state_sections` output.

    Arrays are reshaped to the live tensor shapes, so 1-D tensors stored as
    a single row come back 1-D. A tensor that is shrunk now but had no
    gamma saved starts from uniform gamma.
    """
    if f"{STATE_PREFIX}k" not in sections:
        raise StructuralError("checkpoint holds no optimizer state")
    fresh = init_state({n: WeightTensor(n, np.asarray(d)) for n, d in params.items()}, config)
    state = OptimizerState(k=int(round(float(np.ravel(sections[f"{STATE_PREFIX}k"])[0]))))

    def section(key: str, shape: Tuple[int, ...]) -> np.ndarray:
        if key not in sections:
            raise StructuralError(f"checkpoint is missing {key!r}")
        array = np.asarray(sections[key], dtype=np.float64)
        if array.size != int(np.prod(shape)):
            raise DimensionError(f"{key!r} has {array.size} entries, expected shape {shape}")
        return array.reshape(shape).copy()

    for name, ts in fresh.tensors.items():
        base = f"{STATE_PREFIX}{name}/"
        gamma = ts.gamma
        if gamma is not None and base + "gamma" in sections:
            gamma = GammaState(
                section(base + "gamma", gamma.gamma.shape),
                int(round(float(np.ravel(section(base + "ell", (1,)))[0]))),
            )
        elif gamma is not None:
            logger.warning("no saved gamma for %s; starting from uniform weights", name)
        state.tensors[name] = TensorState(
            m=section(base + "m", ts.m.shape),
            v=section(base + "v", ts.v.shape),
            gamma=gamma,
        )
    return state


@dataclass(frozen=True)
class TensorSparsity:
    size: int
    nonzero: int
    nonzero_fraction: float
    block_nonzero_fraction: float


@dataclass(frozen=True)
class SparsityReport:
    tensors: Dict[str, TensorSparsity]
    nonzero_fraction: float
    block_nonzero_fraction: float
    block_shape: Tuple[int, int]

    def as_dict(self) -> Dict[str, object]:
        return {
            "block_shape": list(self.block_shape),
            "nonzero_fraction": self.nonzero_fraction,
            "block_nonzero_fraction": self.block_nonzero_fraction,
            "tensors": {
                name: {
                    "size": t.size,
                    "nonzero": t.nonzero,
                    "nonzero_fraction": t.nonzero_fraction,
                    "block_nonzero_fraction": t.block_nonzero_fraction,
                }
                for name, t in self.tensors.items()
            },
        }


def sparsity_report(
    params: Mapping[str, np.ndarray],
    block_shape: Tuple[int, int] = (1, 1),
) -> SparsityReport:
    """Per-tensor and element-weighted global nonzero fractions.

    1-D tensors are treated as a single row; shapes that do not divide the
    block shape are zero-padded for the block count.
    """
    per_tensor: Dict[str, TensorSparsity] = {}
    total = nonzero_total = 0
    blocks_total = blocks_nonzero = 0
    for name in sorted(params):
        data = np.asarray(getattr(params[name], "data", params[name]), dtype=np.float64)
        size = int(data.size)
        nonzero = int(np.count_nonzero(data))
        if size:
            matrix = data.reshape(1, -1) if data.ndim < 2 else data.reshape(data.shape[0], -1)
            norms = block_norms(matrix, block_shape[0], block_shape[1], pad=True)
            n_blocks, n_live = int(norms.size), int(np.count_nonzero(norms))
        else:
            n_blocks = n_live = 0
        per_tensor[name] = TensorSparsity(
            size=size,
            nonzero=nonzero,
            nonzero_fraction=nonzero / size if size else 0.0,
            block_nonzero_fraction=n_live / n_blocks if n_blocks else 0.0,
        )
        total += size
        nonzero_total += nonzero
        blocks_total += n_blocks
        blocks_nonzero += n_live
    return SparsityReport(
        tensors=per_tensor,
        nonzero_fraction=nonzero_total / total if total else 0.0,
        block_nonzero_fraction=blocks_nonzero / blocks_total if blocks_total else 0.0,
        block_shape=tuple(block_shape),
    )

