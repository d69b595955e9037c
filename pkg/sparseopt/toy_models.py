"""
Desk-scale problems for exercising the SparseOptimizer.

LassoProblem is the convex testbed (least squares plus the l1 penalty handled
by the prox, with a coordinate-descent oracle). TinyNetProblem is a tanh
two-layer perceptron on synthetic classes, with hand-written backprop.
Problems are immutable once generated; train() owns its optimizer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Protocol, Tuple

import numpy as np
import scipy.linalg
import scipy.special

from .exceptions import DimensionError, DivergenceError, OracleConvergenceError, ParameterError
from .optimizer import OptimizerConfig, OptimizerState, SparseOptimizer, prox_lambda, sparsity_report
from .prox_core import threshold

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6
PLATEAU_WINDOW = 50
PLATEAU_REL_TOL = 1e-6


class Problem(Protocol):
    prox_allowlist: Optional[Tuple[str, ...]]

    def initial_params(self) -> Dict[str, np.ndarray]: ...

    def objective_and_grads(
        self, params: Mapping[str, np.ndarray]
    ) -> Tuple[float, Dict[str, np.ndarray]]: ...


# ============================================================================
# LASSO
# ============================================================================

@dataclass(frozen=True)
class LassoProblem:
    A: np.ndarray
    y: np.ndarray
    w_true: np.ndarray
    seed: int
    noise_std: float = 0.01
    prox_allowlist: Optional[Tuple[str, ...]] = ("w",)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def initial_params(self) -> Dict[str, np.ndarray]:
        return {"w": np.zeros(self.d)}

    def objective_and_grads(self, params):
        value, grad = lasso_objective_and_grad(self, params["w"])
        return value, {"w": grad}

    def to_tensors(self) -> Dict[str, np.ndarray]:
        """2-D tensors for the PSBR container."""
        return {
            "A": self.A,
            "y": self.y.reshape(1, -1),
            "w_true": self.w_true.reshape(1, -1),
        }

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], seed: int = 0) -> "LassoProblem":
        return cls(
            A=np.asarray(tensors["A"], dtype=np.float64),
            y=np.asarray(tensors["y"], dtype=np.float64).ravel(),
            w_true=np.asarray(tensors["w_true"], dtype=np.float64).ravel(),
            seed=seed,
        )


def make_lasso_problem(
    n: int = 50,
    d: int = 20,
    s: int = 5,
    noise_std: float = 0.01,
    seed: int = 0,
) -> LassoProblem:
    """y = A w_true + noise with unit-norm columns and s nonzeros in [1, 2]."""
    if not 0 < s <= d:
        raise ParameterError(f"need 0 < s <= d, got s={s}, d={d}")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d))
    A /= np.linalg.norm(A, axis=0)
    support = np.sort(rng.choice(d, size=s, replace=False))
    w_true = np.zeros(d)
    w_true[support] = rng.choice([-1.0, 1.0], size=s) * rng.uniform(1.0, 2.0, size=s)
    y = A @ w_true + noise_std * rng.standard_normal(n)
    return LassoProblem(A=A, y=y, w_true=w_true, seed=seed, noise_std=noise_std)


def lasso_objective_and_grad(problem: LassoProblem, w: np.ndarray) -> Tuple[float, np.ndarray]:
    """0.5*||Aw - y||^2 and its gradient A^T (Aw - y)."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (problem.d,):
        raise DimensionError(f"w has shape {w.shape}, expected ({problem.d},)")
    residual = problem.A @ w - problem.y
    return 0.5 * float(residual @ residual), problem.A.T @ residual


def lasso_full_objective(problem: LassoProblem, w: np.ndarray, weight: float) -> float:
    value, _ = lasso_objective_and_grad(problem, w)
    return value + weight * float(np.sum(np.abs(w)))


def soft_threshold(x, tau):
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def lasso_oracle(
    problem: LassoProblem,
    effective_l1_weight: float,
    tol: float = 1e-10,
    max_sweeps: int = 100_000,
) -> np.ndarray:
    """Cyclic coordinate descent for 0.5*||Aw - y||^2 + weight*||w||_1."""
    if effective_l1_weight < 0:
        raise ParameterError(f"l1 weight must be >= 0, got {effective_l1_weight}")
    A, y = problem.A, problem.y
    col_sq = np.einsum("ij,ij->j", A, A)
    w = np.zeros(problem.d)
    residual = y.copy()
    change = np.inf
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for j in range(problem.d):
            if col_sq[j] == 0.0:
                continue
            rho = A[:, j] @ residual + col_sq[j] * w[j]
            w_j = soft_threshold(rho, effective_l1_weight) / col_sq[j]
            delta = w_j - w[j]
            if delta != 0.0:
                residual -= delta * A[:, j]
                w[j] = w_j
                change = max(change, abs(delta))
        if change < tol:
            logger.debug("lasso oracle converged in %d sweeps", sweep)
            return w
    raise OracleConvergenceError(max_sweeps, change)


def least_squares(problem: LassoProblem) -> np.ndarray:
    solution, *_ = scipy.linalg.lstsq(problem.A, problem.y)
    return solution


def equivalent_l1_weight(config: OptimizerConfig) -> float:
    """Lasso weight whose solution is the optimizer's fixed point.

    Assumes gamma == 1, a constant schedule and Adam moments at steady state
    (m_hat = g, v_hat = g**2). Survivors then satisfy |g| = c*(|g| + eps) and
    zeros |g| <= eps*c/(1-c), with c = tau / (eta*alpha).
    """
    if config.prox is None:
        return 0.0
    if config.schedule != "constant":
        raise ParameterError("the l1 equivalence needs a constant schedule")
    lam = prox_lambda(1.0, config)
    tau = threshold(lam, config.prox.mu, 1.0, config.prox.threshold_convention)
    c = tau / config.alpha
    if c >= 1.0:
        raise ParameterError(f"threshold ratio {c:.4g} >= 1 shrinks every weight to zero")
    return config.epsilon_adam * c / (1.0 - c)


# ============================================================================
# TINYNET
# ============================================================================

@dataclass(frozen=True)
class TinyNetProblem:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    hidden: int
    classes: int
    seed: int
    prox_allowlist: Optional[Tuple[str, ...]] = None

    @property
    def d_in(self) -> int:
        return self.X_train.shape[1]

    def initial_params(self) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng(self.seed + 1)
        return {
            "W1": rng.standard_normal((self.d_in, self.hidden)) / np.sqrt(self.d_in),
            "b1": np.zeros(self.hidden),
            "W2": rng.standard_normal((self.hidden, self.classes)) / np.sqrt(self.hidden),
            "b2": np.zeros(self.classes),
        }

    def objective_and_grads(self, params):
        return tinynet_loss_and_grads(self, params, self.X_train, self.y_train)


def make_tinynet_problem(
    d_in: int = 20,
    hidden: int = 16,
    classes: int = 3,
    informative: int = 4,
    n_train: int = 1000,
    n_test: int = 2000,
    seed: int = 0,
) -> TinyNetProblem:
    """Gaussian inputs labelled by a random linear rule on the first features."""
    if not 0 < informative <= d_in:
        raise ParameterError(f"need 0 < informative <= d_in, got {informative}, {d_in}")
    rng = np.random.default_rng(seed)
    rule = rng.standard_normal((informative, classes))

    def sample(count: int) -> Tuple[np.ndarray, np.ndarray]:
        X = rng.standard_normal((count, d_in))
        return X, np.argmax(X[:, :informative] @ rule, axis=1)

    X_train, y_train = sample(n_train)
    X_test, y_test = sample(n_test)
    return TinyNetProblem(X_train, y_train, X_test, y_test, hidden, classes, seed)


def _forward(params, X):
    H = np.tanh(X @ params["W1"] + params["b1"])
    return H, H @ params["W2"] + params["b2"]


def tinynet_loss_and_grads(
    problem: TinyNetProblem,
    params: Mapping[str, np.ndarray],
    X: np.ndarray,
    y: np.ndarray,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean softmax cross-entropy and its analytic gradients."""
    n = X.shape[0]
    H, logits = _forward(params, X)
    rows = np.arange(n)
    loss = float(np.mean(scipy.special.logsumexp(logits, axis=1) - logits[rows, y]))

    d_logits = scipy.special.softmax(logits, axis=1)
    d_logits[rows, y] -= 1.0
    d_logits /= n
    d_pre = (d_logits @ params["W2"].T) * (1.0 - H * H)
    grads = {
        "W2": H.T @ d_logits,
        "b2": d_logits.sum(axis=0),
        "W1": X.T @ d_pre,
        "b1": d_pre.sum(axis=0),
    }
    return loss, grads


def tinynet_accuracy(problem: TinyNetProblem, params: Mapping[str, np.ndarray], split: str = "test") -> float:
    X, y = (problem.X_test, problem.y_test) if split == "test" else (problem.X_train, problem.y_train)
    _, logits = _forward(params, X)
    return float(np.mean(np.argmax(logits, axis=1) == y))


# ============================================================================
# TRAINING LOOP
# ============================================================================

@dataclass(frozen=True)
class TrajectoryPoint:
    step: int
    objective: float
    penalty: float
    nonzero_count: int
    nonzero_fraction: float
    l1_norm: float


@dataclass
class TrainResult:
    trajectory: List[TrajectoryPoint]
    params: Dict[str, np.ndarray]
    state: OptimizerState
    stopped_early: bool = False


@dataclass
class PlateauDetector:
    """Flags a relative objective change below ``rel_tol`` across ``window`` steps."""

    window: int = PLATEAU_WINDOW
    rel_tol: float = PLATEAU_REL_TOL
    history: List[float] = field(default_factory=list)

    def update(self, objective: float) -> bool:
        self.history.append(objective)
        if len(self.history) <= self.window:
            return False
        then = self.history[-self.window - 1]
        scale = max(abs(then), np.finfo(float).tiny)
        return abs(objective - then) / scale < self.rel_tol


def config_for_problem(problem: Problem, config: OptimizerConfig) -> OptimizerConfig:
    """Apply the problem's prox allowlist unless the config sets its own."""
    if config.prox_allowlist is None and problem.prox_allowlist is not None:
        return replace(config, prox_allowlist=problem.prox_allowlist)
    return config


def train(
    problem: Problem,
    config: OptimizerConfig,
    steps: int,
    plateau: Optional[PlateauDetector] = None,
    divergence_factor: float = DIVERGENCE_FACTOR,
    initial_params: Optional[Mapping[str, np.ndarray]] = None,
    initial_state: Optional[OptimizerState] = None,
) -> TrainResult:
    """Run the optimizer for ``steps`` steps, or until a plateau if one is given.

    ``initial_params`` and ``initial_state`` resume a saved run; trajectory
    steps then continue from the saved step count.
    """
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    config = config_for_problem(problem, config)
    params0 = problem.initial_params() if initial_params is None else initial_params
    optimizer = SparseOptimizer(params0, config, initial_state)
    objective, grads = problem.objective_and_grads(optimizer.arrays())
    bound = divergence_factor * max(objective, np.finfo(float).tiny)
    trajectory: List[TrajectoryPoint] = []
    stopped_early = False

    for _ in range(steps):
        params = optimizer.step(grads)
        k = optimizer.k
        objective, grads = problem.objective_and_grads(params)
        if not np.isfinite(objective) or objective > bound:
            raise DivergenceError(k, objective, bound)

        report = sparsity_report(params)
        nonzero = sum(t.nonzero for t in report.tensors.values())
        trajectory.append(TrajectoryPoint(
            step=k,
            objective=objective,
            penalty=optimizer.penalty(),
            nonzero_count=nonzero,
            nonzero_fraction=report.nonzero_fraction,
            l1_norm=float(sum(np.sum(np.abs(p)) for p in params.values())),
        ))
        if plateau is not None and plateau.update(objective):
            logger.info("objective plateaued at step %d", k)
            stopped_early = True
            break

    logger.info("trained %d steps: objective=%.6g nonzero=%d",
                len(trajectory), trajectory[-1].objective, trajectory[-1].nonzero_count)
    return TrainResult(trajectory, optimizer.arrays(), optimizer.state, stopped_early)

