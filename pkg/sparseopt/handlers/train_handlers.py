"""
Training Handlers

Train a toy problem with SparseOptimizer and write its checkpoint and
per-step trajectory.
"""

from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from ..bench import read_csv_text, write_csv_text
from ..config import RunConfig
from ..container import load, save
from ..exceptions import DimensionError, ParameterError, StructuralError
from ..optimizer import (
    OptimizerConfig,
    OptimizerState,
    is_state_section,
    restore_state,
    sparsity_report,
    state_sections,
)
from ..prox_core import ProxConfig
from ..toy_models import (
    PlateauDetector,
    Problem,
    TrajectoryPoint,
    config_for_problem,
    make_lasso_problem,
    make_tinynet_problem,
    tinynet_accuracy,
    train,
)
from .common import guarded, ok

CHECKPOINT_NAME = "checkpoint.psbr"
TRAJECTORY_NAME = "trajectory.csv"
TRAJECTORY_FIELDS = ("step", "objective", "penalty", "nonzero_count", "nonzero_fraction",
                     "l1_norm")


def optimizer_config_from_run(run: RunConfig) -> OptimizerConfig:
    prox = None
    if run.prox_enabled:
        prox = ProxConfig(
            mu=run.mu,
            lambda_=run.prox_lambda if run.prox_lambda is not None else 1.0,
            epsilon_gamma=run.epsilon_gamma,
            ell_max=run.ell_max,
            reweight=run.reweight,
            block_rows=run.block_rows,
            block_cols=run.block_cols,
            reweight_every=run.reweight_every,
            threshold_convention=run.threshold_convention,
            tie_lambda_to_step=run.prox_lambda is None,
            schedule_prox=run.schedule_prox,
            pad=run.pad,
        )
    return OptimizerConfig(
        alpha=run.alpha,
        beta1=run.beta1,
        beta2=run.beta2,
        epsilon_adam=run.epsilon_adam,
        weight_decay=run.weight_decay,
        schedule=run.schedule,
        total_steps=run.steps,
        prox=prox,
    )


def build_problem(run: RunConfig):
    if run.problem == "lasso":
        return make_lasso_problem(run.n, run.d, run.s, run.noise_std, run.seed)
    return make_tinynet_problem(run.d_in, run.hidden, run.classes, run.informative,
                                run.n_train, run.n_test, run.seed)


def trajectory_csv(trajectory: List[TrajectoryPoint], run: RunConfig) -> str:
    rows = [
        {
            "step": p.step,
            "objective": repr(p.objective),
            "penalty": repr(p.penalty),
            "nonzero_count": p.nonzero_count,
            "nonzero_fraction": repr(p.nonzero_fraction),
            "l1_norm": repr(p.l1_norm),
        }
        for p in trajectory
    ]
    return write_csv_text("trajectory", run.to_dict(), TRAJECTORY_FIELDS, rows)


def read_trajectory(path: Path) -> List[Dict[str, str]]:
    _, rows = read_csv_text(Path(path).read_text(encoding="utf-8"))
    return rows


def load_training_checkpoint(
    path: str, problem: Problem, config: OptimizerConfig,
) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """Read params and optimizer state back from a train checkpoint."""
    dense = load(path).dense_tensors()
    params: Dict[str, np.ndarray] = {}
    for name, init in problem.initial_params().items():
        if name not in dense:
            raise StructuralError(f"{path} has no tensor {name!r}")
        if dense[name].size != init.size:
            raise DimensionError(
                f"{path}: {name!r} has {dense[name].size} entries, expected shape {init.shape}"
            )
        params[name] = dense[name].reshape(init.shape)
    sections = {name: a for name, a in dense.items() if is_state_section(name)}
    return params, restore_state(sections, params, config_for_problem(problem, config))


@guarded
def handle_train(args: Dict) -> Dict:
    """Train, then write checkpoint.psbr and trajectory.csv under the run's out dir"""

    run: RunConfig = args["config"]
    out_dir = Path(run.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    problem = build_problem(run)
    config = optimizer_config_from_run(run)
    params, state, steps = None, None, run.steps
    if run.resume:
        params, state = load_training_checkpoint(run.resume, problem, config)
        steps = run.steps - state.k
        if steps < 1:
            raise ParameterError(
                f"{run.resume} is already at step {state.k}; --steps must exceed it"
            )

    result = train(
        problem,
        config,
        steps,
        plateau=PlateauDetector() if run.plateau else None,
        initial_params=params,
        initial_state=state,
    )

    # Checkpoints are float32; the report is taken on what was written.
    stored = {name: np.asarray(w, dtype=np.float32).astype(np.float64)
              for name, w in sorted(result.params.items())}
    checkpoint = save(out_dir / CHECKPOINT_NAME, {**stored, **state_sections(result.state)},
                      run.to_dict())
    trajectory = out_dir / TRAJECTORY_NAME
    trajectory.write_text(trajectory_csv(result.trajectory, run), encoding="utf-8")

    report = sparsity_report(stored, run.block_shape)
    final = result.trajectory[-1]
    summary = {
        "steps": len(result.trajectory),
        "resumed_from": state.k if state is not None else 0,
        "stopped_early": result.stopped_early,
        "objective": final.objective,
        "nonzero_fraction": report.nonzero_fraction,
        "block_nonzero_fraction": report.block_nonzero_fraction,
    }
    if run.problem == "tinynet":
        summary["test_accuracy"] = tinynet_accuracy(problem, result.params, "test")

    return ok(
        f"Trained {run.problem} for {summary['steps']} steps",
        checkpoint=str(checkpoint),
        trajectory=str(trajectory),
        summary=summary,
        sparsity=report.as_dict(),
    )
