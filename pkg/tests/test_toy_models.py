from dataclasses import replace

import numpy as np
import pytest

from sparseopt.config import PRESETS
from sparseopt.exceptions import DivergenceError, OracleConvergenceError, ParameterError
from sparseopt.optimizer import OptimizerConfig, sparsity_report
from sparseopt.prox_core import ProxConfig
from sparseopt.toy_models import (
    LassoProblem,
    PlateauDetector,
    equivalent_l1_weight,
    lasso_full_objective,
    lasso_objective_and_grad,
    lasso_oracle,
    least_squares,
    make_lasso_problem,
    make_tinynet_problem,
    tinynet_accuracy,
    tinynet_loss_and_grads,
    train,
)


def preset_config(problem: str, **prox_overrides) -> OptimizerConfig:
    p = PRESETS[problem]
    prox = ProxConfig(mu=p["mu"], reweight_every=p["reweight_every"], reweight=p["reweight"])
    return OptimizerConfig(
        alpha=p["alpha"],
        beta2=p["beta2"],
        epsilon_adam=p["epsilon_adam"],
        total_steps=p["steps"],
        prox=replace(prox, **prox_overrides),
    )


@pytest.fixture(scope="module")
def lasso():
    return make_lasso_problem(n=50, d=20, s=5, noise_std=0.01, seed=0)


class TestLassoProblem:
    def test_generator_is_seeded(self):
        a = make_lasso_problem(seed=3)
        b = make_lasso_problem(seed=3)
        np.testing.assert_array_equal(a.A, b.A)
        np.testing.assert_array_equal(a.y, b.y)

    def test_unit_columns_and_support(self, lasso):
        np.testing.assert_allclose(np.linalg.norm(lasso.A, axis=0), 1.0)
        assert np.count_nonzero(lasso.w_true) == 5
        assert np.all(np.abs(lasso.w_true[lasso.w_true != 0]) >= 1.0)

    def test_gradient(self, lasso):
        w = np.linspace(-1, 1, 20)
        value, grad = lasso_objective_and_grad(lasso, w)
        h = 1e-6
        e = np.zeros(20)
        e[3] = h
        fd = (lasso_objective_and_grad(lasso, w + e)[0] - lasso_objective_and_grad(lasso, w - e)[0]) / (2 * h)
        assert fd == pytest.approx(grad[3], abs=1e-6)

    def test_gradient_at_random_points(self, lasso):
        rng = np.random.default_rng(11)
        h = 1e-5
        for _ in range(100):
            w = rng.normal(scale=2.0, size=20)
            direction = rng.normal(size=20)
            _, grad = lasso_objective_and_grad(lasso, w)
            fd = (lasso_objective_and_grad(lasso, w + h * direction)[0]
                  - lasso_objective_and_grad(lasso, w - h * direction)[0]) / (2 * h)
            assert fd == pytest.approx(grad @ direction, rel=1e-6, abs=1e-6)

    def test_tensor_round_trip(self, lasso):
        back = LassoProblem.from_tensors(lasso.to_tensors(), seed=lasso.seed)
        np.testing.assert_array_equal(back.A, lasso.A)
        np.testing.assert_array_equal(back.y, lasso.y)

    def test_bad_support_size(self):
        with pytest.raises(ParameterError):
            make_lasso_problem(d=4, s=5)


class TestLassoOracle:
    def test_zero_weight_is_least_squares(self, lasso):
        np.testing.assert_allclose(lasso_oracle(lasso, 0.0), least_squares(lasso), atol=1e-7)

    def test_large_weight_gives_zero(self, lasso):
        cap = np.max(np.abs(lasso.A.T @ lasso.y))
        np.testing.assert_array_equal(lasso_oracle(lasso, cap * 1.01), np.zeros(20))

    def test_optimality_conditions(self, lasso):
        weight = 0.1
        w = lasso_oracle(lasso, weight)
        _, grad = lasso_objective_and_grad(lasso, w)
        on = w != 0
        np.testing.assert_allclose(grad[on], -weight * np.sign(w[on]), atol=1e-7)
        assert np.all(np.abs(grad[~on]) <= weight + 1e-7)

    def test_budget_exhausted(self, lasso):
        with pytest.raises(OracleConvergenceError):
            lasso_oracle(lasso, 0.0, tol=0.0, max_sweeps=3)


class TestLassoRecovery:
    def test_matches_oracle(self, lasso):
        config = preset_config("lasso")
        weight = equivalent_l1_weight(config)
        assert weight == pytest.approx(0.1)

        result = train(lasso, config, steps=PRESETS["lasso"]["steps"])
        w = result.params["w"]
        oracle = lasso_oracle(lasso, weight)

        got = lasso_full_objective(lasso, w, weight)
        best = lasso_full_objective(lasso, oracle, weight)
        assert abs(got - best) <= 0.01 * best
        np.testing.assert_array_equal(np.flatnonzero(w), np.flatnonzero(oracle))

    def test_reweighting_does_not_add_nonzeros(self, lasso):
        steps = PRESETS["lasso"]["steps"]
        plain = train(lasso, preset_config("lasso", reweight=False), steps)
        reweighted = train(lasso, preset_config("lasso", reweight=True, ell_max=3), steps)
        assert reweighted.trajectory[-1].nonzero_count <= plain.trajectory[-1].nonzero_count

    def test_trajectory_fields(self, lasso):
        result = train(lasso, preset_config("lasso"), steps=10)
        assert [p.step for p in result.trajectory] == list(range(1, 11))
        last = result.trajectory[-1]
        assert last.l1_norm == pytest.approx(np.sum(np.abs(result.params["w"])))
        assert last.nonzero_fraction == pytest.approx(last.nonzero_count / 20)

    def test_deterministic(self, lasso):
        a = train(lasso, preset_config("lasso"), steps=50)
        b = train(lasso, preset_config("lasso"), steps=50)
        np.testing.assert_array_equal(a.params["w"], b.params["w"])
        assert a.trajectory == b.trajectory

    def test_divergence_abort(self, lasso):
        config = OptimizerConfig(alpha=50.0, epsilon_adam=1e-8, prox=None)
        with pytest.raises(DivergenceError) as info:
            train(lasso, config, steps=200, divergence_factor=10.0)
        assert info.value.step >= 1

    def test_rejects_zero_steps(self, lasso):
        with pytest.raises(ParameterError):
            train(lasso, preset_config("lasso"), steps=0)

    def test_equivalence_requires_constant_schedule(self):
        with pytest.raises(ParameterError):
            equivalent_l1_weight(OptimizerConfig(schedule="cosine"))


class TestPlateau:
    def test_detects_flat_objective(self):
        detector = PlateauDetector(window=3, rel_tol=1e-6)
        flags = [detector.update(1.0) for _ in range(5)]
        assert flags == [False, False, False, True, True]

    def test_ignores_progress(self):
        detector = PlateauDetector(window=2, rel_tol=1e-6)
        assert not any(detector.update(v) for v in [4.0, 3.0, 2.0, 1.0])

    def test_train_stops_early(self, lasso):
        result = train(lasso, preset_config("lasso"), steps=5000,
                       plateau=PlateauDetector(window=50, rel_tol=1e-6))
        assert result.stopped_early
        assert len(result.trajectory) < 5000


class TestTinyNet:
    def test_gradients_match_finite_differences(self):
        problem = make_tinynet_problem(n_train=50, n_test=10, seed=1)
        params = problem.initial_params()
        _, grads = tinynet_loss_and_grads(problem, params, problem.X_train, problem.y_train)
        h = 1e-6
        for name, idx in [("W1", (2, 3)), ("b1", (4,)), ("W2", (5, 1)), ("b2", (2,))]:
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            fd = (tinynet_loss_and_grads(problem, plus, problem.X_train, problem.y_train)[0]
                  - tinynet_loss_and_grads(problem, minus, problem.X_train, problem.y_train)[0]) / (2 * h)
            assert fd == pytest.approx(grads[name][idx], abs=1e-7)

    def test_every_gradient_entry_matches_finite_differences(self):
        problem = make_tinynet_problem(n_train=40, n_test=10, seed=3)
        rng = np.random.default_rng(12)
        h = 1e-6
        for _ in range(3):
            params = {k: v + rng.normal(scale=0.1, size=v.shape)
                      for k, v in problem.initial_params().items()}
            _, grads = tinynet_loss_and_grads(problem, params, problem.X_train, problem.y_train)
            for name, value in params.items():
                for idx in np.ndindex(value.shape):
                    plus = {k: v.copy() for k, v in params.items()}
                    minus = {k: v.copy() for k, v in params.items()}
                    plus[name][idx] += h
                    minus[name][idx] -= h
                    fd = (tinynet_loss_and_grads(problem, plus, problem.X_train, problem.y_train)[0]
                          - tinynet_loss_and_grads(problem, minus, problem.X_train,
                                                   problem.y_train)[0]) / (2 * h)
                    assert fd == pytest.approx(grads[name][idx], abs=1e-6), (name, idx)

    def test_sparsifies_without_losing_accuracy(self):
        problem = make_tinynet_problem(seed=0)
        steps = PRESETS["tinynet"]["steps"]
        sparse = train(problem, preset_config("tinynet"), steps)
        dense = train(problem, replace(preset_config("tinynet"), prox=None), steps)

        weights = {k: v for k, v in sparse.params.items() if k.startswith("W")}
        zero_fraction = 1.0 - sparsity_report(weights).nonzero_fraction
        assert zero_fraction >= 0.5

        drop = tinynet_accuracy(problem, dense.params) - tinynet_accuracy(problem, sparse.params)
        assert drop <= 0.02

    def test_biases_are_never_shrunk(self):
        problem = make_tinynet_problem(n_train=100, n_test=10, seed=2)
        result = train(problem, preset_config("tinynet"), steps=20)
        state = result.state.tensors
        assert state["b1"].gamma is None and state["b2"].gamma is None
        assert state["W1"].gamma is not None
