import json

import numpy as np
import pytest

from sparseopt.cli import main
from sparseopt.config import RunConfig
from sparseopt.container import load, save
from sparseopt.handlers import handle_export_bsr, handle_train
from sparseopt.handlers.train_handlers import read_trajectory
from sparseopt.optimizer import is_state_section, sparsity_report
from sparseopt.toy_models import make_lasso_problem


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--out", str(out), "--seed", "0"]) == 0
    return out


class TestTrain:
    def test_writes_checkpoint_and_trajectory(self, trained):
        rows = read_trajectory(trained / "trajectory.csv")
        assert len(rows) == 500
        assert list(rows[0]) == ["step", "objective", "penalty", "nonzero_count",
                                 "nonzero_fraction", "l1_norm"]
        checkpoint = load(trained / "checkpoint.psbr")
        assert checkpoint.config["problem"] == "lasso"
        assert checkpoint.config["seed"] == 0

    def test_final_fraction_matches_checkpoint(self, trained):
        rows = read_trajectory(trained / "trajectory.csv")
        weights = {name: w for name, w in load(trained / "checkpoint.psbr").dense_tensors().items()
                   if not is_state_section(name)}
        assert float(rows[-1]["nonzero_fraction"]) == sparsity_report(weights).nonzero_fraction

    def test_same_seed_same_bytes(self, tmp_path):
        args = ["train", "--out", str(tmp_path), "--seed", "4", "--steps", "60"]
        assert main(args) == 0
        first = (tmp_path / "trajectory.csv").read_bytes()
        assert main(args) == 0
        assert (tmp_path / "trajectory.csv").read_bytes() == first

    def test_zero_steps_is_usage_error(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--steps", "0"]) == 1

    def test_divergence_exit_code(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--alpha", "1e5", "--steps", "5"]) == 2

    def test_config_file_layering(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# short run\nsteps = 30\nseed = 9\n", encoding="utf-8")
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg), "--seed", "2", "--out", str(out)]) == 0
        config = load(out / "checkpoint.psbr").config
        assert config["steps"] == 30
        assert config["seed"] == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nonsense = 1\n", encoding="utf-8")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 1

    def test_checkpoint_holds_optimizer_state(self, trained):
        checkpoint = load(trained / "checkpoint.psbr")
        assert checkpoint.dense("state/k")[0, 0] == 500
        assert {"state/w/m", "state/w/v", "state/w/gamma", "state/w/ell"} <= set(checkpoint.tensors)

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        straight, first, second = tmp_path / "straight", tmp_path / "first", tmp_path / "second"
        assert main(["train", "--out", str(straight), "--seed", "3", "--steps", "40"]) == 0
        assert main(["train", "--out", str(first), "--seed", "3", "--steps", "20"]) == 0
        assert main(["train", "--out", str(second), "--seed", "3", "--steps", "40",
                     "--resume", str(first / "checkpoint.psbr")]) == 0

        rows = read_trajectory(second / "trajectory.csv")
        assert [int(r["step"]) for r in rows] == list(range(21, 41))
        assert load(second / "checkpoint.psbr").dense("state/k")[0, 0] == 40
        np.testing.assert_allclose(load(second / "checkpoint.psbr").dense("w"),
                                   load(straight / "checkpoint.psbr").dense("w"),
                                   rtol=0, atol=1e-4)

    def test_resume_past_total_steps(self, trained, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--steps", "500",
                     "--resume", str(trained / "checkpoint.psbr")]) == 1

    def test_resume_without_state(self, tmp_path):
        weights = save(tmp_path / "bare.psbr", {"w": np.zeros(20)})
        assert main(["train", "--out", str(tmp_path), "--steps", "10",
                     "--resume", str(weights)]) == 1

    def test_tinynet_block_training(self, tmp_path):
        result = handle_train({"config": RunConfig(
            problem="tinynet", steps=20, n_train=100, n_test=50, block_rows=2, block_cols=1,
            out=str(tmp_path),
        )})
        assert result["exit_code"] == 0
        assert 0.0 <= result["summary"]["test_accuracy"] <= 1.0


class TestExport:
    def test_round_trip_bit_exact(self, trained, tmp_path):
        assert main(["export-bsr", "--checkpoint", str(trained / "checkpoint.psbr"),
                     "--block-shape", "1x1", "--out", str(tmp_path)]) == 0
        exported = load(tmp_path / "export.psbr")
        original = load(trained / "checkpoint.psbr")
        np.testing.assert_array_equal(exported.dense("w"), original.dense("w"))
        assert exported.config["block_rows"] == 1

    def test_zero_tensor_exports_no_blocks(self, tmp_path):
        ckpt = save(tmp_path / "zero.psbr", {"W": np.zeros((4, 4))})
        result = handle_export_bsr({"config": RunConfig(
            checkpoint=str(ckpt), block_rows=2, block_cols=1, out=str(tmp_path / "x"),
        )})
        assert result["exit_code"] == 0
        assert result["blocks"] == {"W": 0}

    def test_non_divisible_without_pad(self, trained, tmp_path):
        args = ["export-bsr", "--checkpoint", str(trained / "checkpoint.psbr"),
                "--block-shape", "2x1", "--out", str(tmp_path)]
        assert main(args) == 1
        assert main(args + ["--pad"]) == 0

    def test_corrupt_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.psbr"
        bad.write_bytes(b"PSBR\x01\x00\x00\x00\x05")
        assert main(["export-bsr", "--checkpoint", str(bad), "--out", str(tmp_path)]) == 1

    def test_missing_checkpoint_flag(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["export-bsr", "--out", str(tmp_path)])
        assert info.value.code == 1


class TestInfer:
    def test_identity(self, tmp_path):
        weights = save(tmp_path / "eye.psbr", {"W": np.eye(6)})
        x = np.arange(12.0).reshape(6, 2)
        np.save(tmp_path / "x.npy", x)
        assert main(["infer", "--bsr", str(weights), "--input", str(tmp_path / "x.npy"),
                     "--out", str(tmp_path)]) == 0
        np.testing.assert_array_equal(load(tmp_path / "activations.psbr").dense("output"), x)

    def test_lasso_predictions(self, trained, tmp_path):
        assert main(["export-bsr", "--checkpoint", str(trained / "checkpoint.psbr"),
                     "--block-shape", "1x1", "--out", str(tmp_path)]) == 0
        problem = make_lasso_problem(seed=0)
        np.save(tmp_path / "design.npy", problem.A.T)
        assert main(["infer", "--bsr", str(tmp_path / "export.psbr"),
                     "--input", str(tmp_path / "design.npy"), "--out", str(tmp_path)]) == 0

        w = load(trained / "checkpoint.psbr").dense("w").ravel()
        predictions = load(tmp_path / "activations.psbr").dense("output").ravel()
        np.testing.assert_allclose(predictions, problem.A @ w, rtol=1e-6, atol=1e-6)

    def test_five_timing_samples(self, tmp_path):
        from sparseopt.handlers import handle_infer

        weights = save(tmp_path / "w.psbr", {"W": np.eye(3)})
        np.save(tmp_path / "x.npy", np.ones(3))
        result = handle_infer({"config": RunConfig(bsr=str(weights), input=str(tmp_path / "x.npy"),
                                                   out=str(tmp_path))})
        assert result["exit_code"] == 0
        assert len(result["samples_ms"]) == 5
        assert " / " in result["message"]

    def test_shape_mismatch(self, tmp_path):
        weights = save(tmp_path / "w.psbr", {"W": np.eye(3)})
        np.save(tmp_path / "x.npy", np.ones((4, 2)))
        assert main(["infer", "--bsr", str(weights), "--input", str(tmp_path / "x.npy"),
                     "--out", str(tmp_path)]) == 1


class TestBenchCommands:
    def test_sweep_then_report(self, tmp_path):
        args = ["bench-sweep", "--out", str(tmp_path), "--dims", "64", "--batch", "4",
                "--shapes", "2", "--paths", "reference", "--repeats", "5"]
        assert main(args) == 0
        report = json.loads((tmp_path / "sweep.json").read_text(encoding="utf-8"))
        assert report["config"]["dims"] == "64"
        assert {s["dims"] for s in report["speedups"]} == {64}
        assert {c["mode"] for c in report["cells"]} == {"sparsity_aware", "structure_oblivious"}
        assert (tmp_path / "sweep_samples.csv").exists()
        assert main(["report", "--out", str(tmp_path)]) == 0

    def test_repeats_below_five_rejected(self, tmp_path):
        assert main(["bench-sweep", "--out", str(tmp_path), "--repeats", "3"]) == 1

    def test_report_missing_file(self, tmp_path):
        assert main(["report", "--input", str(tmp_path / "none.json")]) == 1
