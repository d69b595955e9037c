r"""
Shrinkage operators for the reweighted l1 penalty.

Every function here is pure: inputs are never modified and no module state
is kept, so the operators can be called from any number of threads.

Two threshold conventions are supported:

``paper``
    threshold ``(lambda / mu) * gamma``; exact minimizer of
    ``gamma*|t| + mu/(2*lambda) * (t - z)**2``.
``textbook``
    threshold ``lambda * mu * gamma``; exact minimizer of
    ``mu*gamma*|t| + 1/(2*lambda) * (t - z)**2``, the usual prox of
    ``mu*gamma*||.||_1`` with step ``lambda``.

The two disagree on the direction in which ``mu`` moves the threshold, so
neither is assumed; ``paper`` is the default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import numpy as np

from .exceptions import DimensionError, ParameterError

Convention = Literal["paper", "textbook"]
Mode = Literal["elementwise", "block"]

CONVENTIONS = ("paper", "textbook")


@dataclass(frozen=True)
class ProxConfig:
    """Hyperparameters of the sparsity penalty and its proximal step.

    ``lambda_`` is only read when ``tie_lambda_to_step`` is False; otherwise
    the prox scale follows the effective step ``eta_k * alpha``. With
    ``schedule_prox`` off the tied scale stays at ``alpha``. ``reweight`` off
    keeps gamma at ones (plain l1).
    """

    mu: float = 1.0
    lambda_: float = 1.0
    epsilon_gamma: float = 1e-4
    ell_max: int = 1
    reweight: bool = True
    block_rows: int = 1
    block_cols: int = 1
    reweight_every: int = 100
    threshold_convention: Convention = "paper"
    tie_lambda_to_step: bool = True
    schedule_prox: bool = True
    pad: bool = False

    def __post_init__(self):
        if not self.mu > 0:
            raise ParameterError(f"mu must be > 0, got {self.mu}")
        if not self.lambda_ > 0:
            raise ParameterError(f"lambda must be > 0, got {self.lambda_}")
        if not self.epsilon_gamma > 0:
            raise ParameterError(f"epsilon_gamma must be > 0, got {self.epsilon_gamma}")
        if self.ell_max < 1:
            raise ParameterError(f"ell_max must be >= 1, got {self.ell_max}")
        if self.block_rows < 1 or self.block_cols < 1:
            raise ParameterError(
                f"block shape must be positive, got {self.block_rows}x{self.block_cols}"
            )
        if self.reweight_every < 1:
            raise ParameterError(f"reweight_every must be >= 1, got {self.reweight_every}")
        if self.threshold_convention not in CONVENTIONS:
            raise ParameterError(
                f"threshold_convention must be one of {CONVENTIONS}, "
                f"got {self.threshold_convention!r}"
            )

    @property
    def block_shape(self) -> Tuple[int, int]:
        return (self.block_rows, self.block_cols)

    @property
    def mode(self) -> Mode:
        return "elementwise" if self.block_shape == (1, 1) else "block"


@dataclass(frozen=True)
class GammaState:
    """Reweighting coefficients and the number of reweights applied so far."""

    gamma: np.ndarray
    ell: int = 0


def _check_positive(name: str, value: float) -> None:
    if not value > 0:
        raise ParameterError(f"{name} must be > 0, got {value}")


def _check_convention(convention: str) -> None:
    if convention not in CONVENTIONS:
        raise ParameterError(f"unknown threshold convention {convention!r}")


def threshold(lambda_: float, mu: float, gamma, convention: Convention = "paper"):
    """Effective shrinkage threshold for each gamma entry."""
    _check_convention(convention)
    if convention == "paper":
        return (lambda_ / mu) * gamma
    return (lambda_ * mu) * gamma


def prox_objective(t, z, gamma, lambda_: float, mu: float, convention: Convention = "paper"):
    """Scalar objective minimized by shrink, evaluated entrywise."""
    _check_convention(convention)
    t = np.asarray(t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if convention == "paper":
        return gamma * np.abs(t) + (mu / (2.0 * lambda_)) * (t - z) ** 2
    return mu * gamma * np.abs(t) + (1.0 / (2.0 * lambda_)) * (t - z) ** 2


def shrink_elementwise(
    z: np.ndarray,
    gamma: np.ndarray,
    lambda_: float,
    mu: float,
    convention: Convention = "paper",
) -> np.ndarray:
    """Weighted soft-thresholding.

    Entries with ``|z_i| <= tau_i`` map to 0, the rest to
    ``(1 - tau_i/|z_i|) * z_i``.
    """
    _check_positive("lambda", lambda_)
    _check_positive("mu", mu)
    z = np.asarray(z, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if z.shape != gamma.shape:
        raise DimensionError(f"z shape {z.shape} does not match gamma shape {gamma.shape}")
    if np.any(gamma < 0):
        raise ParameterError("gamma entries must be non-negative")

    tau = threshold(lambda_, mu, gamma, convention)
    magnitude = np.abs(z)
    keep = magnitude > tau
    scale = np.zeros_like(z)
    np.divide(tau, magnitude, out=scale, where=keep)
    scale = np.where(keep, 1.0 - scale, 0.0)
    return scale * z


def block_grid(shape: Tuple[int, int], block_rows: int, block_cols: int, pad: bool = False) -> Tuple[int, int]:
    """Number of (block-rows, block-cols) covering a matrix of ``shape``."""
    rows, cols = shape
    if not pad and (rows % block_rows or cols % block_cols):
        raise DimensionError(
            f"matrix {rows}x{cols} is not divisible by block {block_rows}x{block_cols}; "
            "enable padding to allow it"
        )
    return (-(-rows // block_rows), -(-cols // block_cols))


def _blocked(m: np.ndarray, block_rows: int, block_cols: int, pad: bool) -> np.ndarray:
    """View ``m`` as (br, r, bc, c), zero-padding to a block multiple if allowed."""
    if m.ndim != 2:
        raise DimensionError(f"block mode needs a 2-D matrix, got {m.ndim}-D")
    grid_rows, grid_cols = block_grid(m.shape, block_rows, block_cols, pad)
    padded_rows, padded_cols = grid_rows * block_rows, grid_cols * block_cols
    if (padded_rows, padded_cols) != m.shape:
        m = np.pad(m, ((0, padded_rows - m.shape[0]), (0, padded_cols - m.shape[1])))
    return m.reshape(grid_rows, block_rows, grid_cols, block_cols)


def block_norms(m: np.ndarray, block_rows: int, block_cols: int, pad: bool = False) -> np.ndarray:
    """Frobenius norm of every block, shaped (block-rows, block-cols)."""
    blocks = _blocked(np.asarray(m, dtype=np.float64), block_rows, block_cols, pad)
    return np.sqrt(np.sum(blocks * blocks, axis=(1, 3)))


def shrink_block(
    z: np.ndarray,
    gamma_blocks: np.ndarray,
    lambda_: float,
    mu: float,
    block_rows: int,
    block_cols: int,
    convention: Convention = "paper",
    pad: bool = False,
) -> np.ndarray:
    """Group soft-thresholding over r x c blocks using block Frobenius norms."""
    _check_positive("lambda", lambda_)
    _check_positive("mu", mu)
    z = np.asarray(z, dtype=np.float64)
    blocks = _blocked(z, block_rows, block_cols, pad)
    gamma_blocks = np.asarray(gamma_blocks, dtype=np.float64)
    grid = (blocks.shape[0], blocks.shape[2])
    if gamma_blocks.shape != grid:
        raise DimensionError(f"gamma has shape {gamma_blocks.shape}, expected block grid {grid}")
    if np.any(gamma_blocks < 0):
        raise ParameterError("gamma entries must be non-negative")

    norms = np.sqrt(np.sum(blocks * blocks, axis=(1, 3)))
    tau = threshold(lambda_, mu, gamma_blocks, convention)
    keep = norms > tau
    ratio = np.zeros_like(norms)
    np.divide(tau, norms, out=ratio, where=keep)
    scale = np.where(keep, 1.0 - ratio, 0.0)

    out = blocks * scale[:, None, :, None]
    out = out.reshape(grid[0] * block_rows, grid[1] * block_cols)
    return out[: z.shape[0], : z.shape[1]]


def shrink(z: np.ndarray, gamma: np.ndarray, lambda_: float, config: ProxConfig) -> np.ndarray:
    """Apply the elementwise or block operator selected by ``config``."""
    if config.mode == "elementwise":
        return shrink_elementwise(z, gamma, lambda_, config.mu, config.threshold_convention)
    return shrink_block(
        z, gamma, lambda_, config.mu, config.block_rows, config.block_cols,
        config.threshold_convention, config.pad,
    )


def initial_gamma(shape: Tuple[int, ...], config: ProxConfig) -> GammaState:
    """Uniform weights (plain l1) before the first reweight."""
    if config.mode == "elementwise":
        return GammaState(np.ones(shape), ell=0)
    if len(shape) != 2:
        raise DimensionError(f"block mode needs a 2-D tensor, got shape {shape}")
    grid = block_grid(shape, config.block_rows, config.block_cols, config.pad)
    return GammaState(np.ones(grid), ell=0)


def reweight_gamma(
    w: np.ndarray,
    epsilon_gamma: float,
    mode: Mode = "elementwise",
    block_shape: Tuple[int, int] = (1, 1),
    state: Optional[GammaState] = None,
    pad: bool = False,
) -> GammaState:
    """One reweighting pass: gamma = 1 / (|w| + eps), per entry or per block."""
    _check_positive("epsilon_gamma", epsilon_gamma)
    w = np.asarray(w, dtype=np.float64)
    if mode == "elementwise":
        magnitude = np.abs(w)
    elif mode == "block":
        magnitude = block_norms(w, block_shape[0], block_shape[1], pad)
    else:
        raise ParameterError(f"unknown reweighting mode {mode!r}")

    gamma = 1.0 / (magnitude + epsilon_gamma)
    if state is not None and state.gamma.shape != gamma.shape:
        raise DimensionError(
            f"gamma state shape {state.gamma.shape} does not match {gamma.shape}"
        )
    ell = 0 if state is None else state.ell
    return GammaState(gamma, ell=ell + 1)


def my_gradient(w: np.ndarray, prox_w: np.ndarray, lambda_: float) -> np.ndarray:
    """Gradient of the Moreau envelope, (w - prox(w)) / lambda."""
    _check_positive("lambda", lambda_)
    w = np.asarray(w, dtype=np.float64)
    prox_w = np.asarray(prox_w, dtype=np.float64)
    if w.shape != prox_w.shape:
        raise DimensionError(f"w shape {w.shape} does not match prox shape {prox_w.shape}")
    return (w - prox_w) / lambda_


def moreau_envelope(
    w: np.ndarray,
    gamma: np.ndarray,
    lambda_: float,
    mu: float,
    convention: Convention = "paper",
) -> float:
    """Envelope value whose gradient is my_gradient(w, shrink(w), lambda)."""
    w = np.asarray(w, dtype=np.float64)
    p = shrink_elementwise(w, gamma, lambda_, mu, convention)
    weight = gamma / mu if convention == "paper" else mu * gamma
    return float(np.sum(weight * np.abs(p)) + np.sum((p - w) ** 2) / (2.0 * lambda_))


def penalty_value(
    w: np.ndarray,
    gamma: np.ndarray,
    mu: float,
    mode: Mode = "elementwise",
    block_shape: Tuple[int, int] = (1, 1),
    pad: bool = False,
) -> float:
    """mu * sum(gamma * |w|), or the block Frobenius sum in block mode."""
    w = np.asarray(w, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if mode == "elementwise":
        magnitude = np.abs(w)
    else:
        magnitude = block_norms(w, block_shape[0], block_shape[1], pad)
    if magnitude.shape != gamma.shape:
        raise DimensionError(f"gamma shape {gamma.shape} does not match {magnitude.shape}")
    return float(mu * math.fsum((gamma * magnitude).ravel()))
