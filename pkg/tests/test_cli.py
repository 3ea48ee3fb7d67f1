import csv
import json

import numpy as np
import pytest

import urgate.cli as cli
from urgate.config import ExperimentConfig
from urgate.errors import DivergenceError, GradcheckError
from urgate.train import MetricsRecord, gradient_check

TINY = {
    "task": "copy",
    "task_params": {"length": 4},
    "cell": "lstm",
    "variant": "UR",
    "hidden": 8,
    "train": {"steps": 4, "batch_size": 4, "eval_interval": 2, "eval_batch_size": 8},
}


def _write_config(tmp_path, **changes) -> str:
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({**TINY, "output_dir": str(tmp_path / "run"), **changes}))
    return str(path)


class TestTrain:
    def test_artifacts(self, tmp_path) -> None:
        """Evaluation of a tiny training run and the files it leaves behind."""
        assert cli.main(["train", "--config", _write_config(tmp_path)]) == cli.EXIT_OK
        run = tmp_path / "run"
        rows = cli.read_metrics(run / "metrics.jsonl")
        assert [r["step"] for r in rows] == [0, 2, 4]
        assert set(rows[0]) == set(cli.METRIC_KEYS)
        with open(run / "metrics.csv", newline="") as f:
            assert next(csv.reader(f)) == cli.METRIC_KEYS
        summary = json.loads((run / "summary.json").read_text())
        assert summary["diverged"] is False
        assert summary["final_loss"] == rows[-1]["eval_loss"]
        assert (run / "checkpoints" / "init.npz").exists()
        assert (run / "checkpoints" / "final.npz").exists()
        assert np.load(run / "snapshots" / "forget_means_step4.npy").shape == (8,)
        assert not list(run.rglob("*.tmp"))

    def test_reruns_are_identical(self, tmp_path) -> None:
        """Evaluation of byte-identical metrics for the same config and seed."""
        config = _write_config(tmp_path)
        cli.main(["train", "--config", config, "--out", str(tmp_path / "a"), "--deterministic"])
        cli.main(["train", "--config", config, "--out", str(tmp_path / "b"), "--deterministic"])
        a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    def test_seed_override(self, tmp_path) -> None:
        """Evaluation of --seed changing the init seed in the records."""
        cli.main(["train", "--config", _write_config(tmp_path), "--seed", "5"])
        rows = cli.read_metrics(tmp_path / "run" / "metrics.jsonl")
        assert {r["seed"] for r in rows} == {5}

    def test_bad_variant(self, tmp_path, capsys) -> None:
        """Evaluation of exit code 1 and the listed variants for an unknown variant."""
        assert cli.main(["train", "--config", _write_config(tmp_path, variant="XX")]) == cli.EXIT_CONFIG
        assert "'UR'" in capsys.readouterr().err

    def test_missing_config(self, tmp_path) -> None:
        """Evaluation of exit code 1 for a missing file and for bad usage."""
        assert cli.main(["train", "--config", str(tmp_path / "none.json")]) == cli.EXIT_CONFIG
        assert cli.main(["train"]) == cli.EXIT_CONFIG

    @pytest.mark.parametrize("value", ["lots", "0"])
    def test_bad_eval_batch_env(self, tmp_path, monkeypatch, value: str) -> None:
        """Evaluation of exit code 1 for a malformed URGATE_EVAL_BATCH."""
        monkeypatch.setenv("URGATE_EVAL_BATCH", value)
        doc = {**TINY, "train": {k: v for k, v in TINY["train"].items() if k != "eval_batch_size"}}
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({**doc, "output_dir": str(tmp_path / "run")}))
        assert cli.main(["train", "--config", str(path)]) == cli.EXIT_CONFIG

    def test_eval_batch_env(self, tmp_path, monkeypatch) -> None:
        """Evaluation of URGATE_EVAL_BATCH filling in a missing eval batch size."""
        monkeypatch.setenv("URGATE_EVAL_BATCH", "4")
        doc = {**TINY, "train": {k: v for k, v in TINY["train"].items() if k != "eval_batch_size"}}
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({**doc, "output_dir": str(tmp_path / "run")}))
        assert cli.main(["train", "--config", str(path)]) == cli.EXIT_OK

    def test_divergence(self, tmp_path, monkeypatch) -> None:
        """Evaluation of exit code 2, partial metrics and the diverged summary."""

        def diverging(task, net, cfg, variant="", on_snapshot=None):
            yield MetricsRecord(0, 2.0, 2.0, 0.0, variant=variant)
            raise DivergenceError(1, float("nan"))

        monkeypatch.setattr(cli, "train_loop", diverging)
        assert cli.main(["train", "--config", _write_config(tmp_path)]) == cli.EXIT_DIVERGED
        run = tmp_path / "run"
        assert len(cli.read_metrics(run / "metrics.jsonl")) == 1
        assert json.loads((run / "summary.json").read_text())["diverged"] is True
        assert not (run / "checkpoints" / "final.npz").exists()


class TestSweep:
    def _config(self, tmp_path, variants, seeds) -> ExperimentConfig:
        doc = {**TINY, "output_dir": str(tmp_path), "sweep": {"variants": variants, "seeds": seeds}}
        return ExperimentConfig.from_dict(doc)

    async def test_single_run_aggregate(self, tmp_path) -> None:
        """Evaluation of a one-run sweep: the median is the run's own curve."""
        path = await cli.run_sweep(self._config(tmp_path, ["UR"], [0]), workers=1)
        run = cli.read_metrics(tmp_path / "gate_UR_seed0" / "metrics.jsonl")
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert [float(r["median"]) for r in rows] == [r["eval_loss"] for r in run]
        assert all(r["median"] == r["q_lo"] == r["q_hi"] for r in rows)

    async def test_median_over_seeds(self, tmp_path) -> None:
        """Evaluation of the per-step median over three seeds and two variants."""
        path = await cli.run_sweep(self._config(tmp_path, ["--", "UR"], [0, 1, 2]), workers=2)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["variant"] for r in rows] == ["--"] * 3 + ["UR"] * 3
        for row in rows:
            per_seed = [
                next(
                    m["eval_loss"]
                    for m in cli.read_metrics(tmp_path / cli.run_dir_name(row["variant"], s) / "metrics.jsonl")
                    if m["step"] == int(row["step"])
                )
                for s in range(3)
            ]
            assert float(row["median"]) == pytest.approx(np.median(per_seed))
        assert (tmp_path / "gate_xx_seed0").is_dir()
        summary = json.loads((tmp_path / "sweep_summary.json").read_text())
        assert summary == {"runs": 6, "diverged": [], "quantiles": [0.2, 0.8]}

    def test_sweep_rejects_seed(self, tmp_path) -> None:
        """Evaluation of --seed being refused for a sweep."""
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps({**TINY, "sweep": {"variants": ["UR"], "seeds": [0]}}))
        assert cli.main(["sweep", "--config", str(path), "--seed", "1"]) == cli.EXIT_CONFIG

    def test_aggregate_ordering(self) -> None:
        """Evaluation of rows ordered by variant, then step."""
        records = {
            ("UR", 0): [{"step": 0, "eval_loss": 1.0}, {"step": 5, "eval_loss": 0.5}],
            ("--", 0): [{"step": 0, "eval_loss": 2.0}],
        }
        rows = cli.aggregate(records, (0.2, 0.8))
        assert [(r[0], r[1]) for r in rows] == [(0, "--"), (0, "UR"), (5, "UR")]


class TestAnalyze:
    def test_contour_grid(self, tmp_path) -> None:
        """Evaluation of the 101 x 101 contour table."""
        assert cli.main(["analyze", "contour", "--out", str(tmp_path)]) == cli.EXIT_OK
        assert len((tmp_path / "contour.csv").read_text().splitlines()) == 1 + 101 * 101

    def test_bounds(self, tmp_path) -> None:
        """Evaluation of the bounds table on interior g values."""
        assert cli.main(["analyze", "bounds", "--grid", "9", "--out", str(tmp_path)]) == cli.EXIT_OK
        with open(tmp_path / "bounds.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 9
        assert all(float(r["min"]) <= float(r["max"]) for r in rows)

    def test_samples(self, tmp_path) -> None:
        """Evaluation of sampled chrono decay periods with JSON parameters."""
        argv = ["analyze", "samples", "--sampler", "chrono", "--params", '{"t_max": 50}', "--n", "200"]
        assert cli.main([*argv, "--out", str(tmp_path)]) == cli.EXIT_OK
        with open(tmp_path / "samples_chrono.csv", newline="") as f:
            periods = [float(r["decay_period"]) for r in csv.DictReader(f)]
        assert len(periods) == 200 and min(periods) >= 2.0 and max(periods) <= 50.0

    def test_missing_checkpoint(self, tmp_path) -> None:
        """Evaluation of exit code 1 for a missing input."""
        argv = ["analyze", "histogram", "--input", str(tmp_path / "nope.npz"), "--out", str(tmp_path)]
        assert cli.main(argv) == cli.EXIT_CONFIG

    def test_truncated_checkpoint(self, tmp_path, capsys) -> None:
        """Evaluation of exit code 1 and a message for a cut-off checkpoint."""
        cli.main(["train", "--config", _write_config(tmp_path)])
        ckpt = tmp_path / "run" / "checkpoints" / "final.npz"
        raw = ckpt.read_bytes()
        ckpt.write_bytes(raw[: len(raw) // 2])
        argv = ["analyze", "histogram", "--input", str(ckpt), "--out", str(tmp_path)]
        assert cli.main(argv) == cli.EXIT_CONFIG
        assert "corrupt checkpoint" in capsys.readouterr().err

    def test_chrono_checkpoint_timescales(self, tmp_path) -> None:
        """Evaluation of decay periods of an untrained chrono cell lying in [2, T_max]."""
        config = _write_config(tmp_path, variant="C-", gate={"t_max": 20})
        cli.main(["train", "--config", config])
        ckpt = tmp_path / "run" / "checkpoints" / "init.npz"
        assert cli.main(["analyze", "timescales", "--input", str(ckpt), "--out", str(tmp_path)]) == 0
        with open(tmp_path / "timescales.csv", newline="") as f:
            periods = [float(r["decay_period"]) for r in csv.DictReader(f)]
        assert len(periods) == 8
        assert min(periods) >= 2.0 - 1e-9 and max(periods) <= 20.0 + 1e-9

    def test_histogram_from_recording(self, tmp_path) -> None:
        """Evaluation of a histogram read from a saved recording."""
        np.save(tmp_path / "rec.npy", np.full((2, 3, 4), 0.95))
        argv = ["analyze", "histogram", "--input", str(tmp_path / "rec.npy"), "--out", str(tmp_path)]
        assert cli.main(argv) == cli.EXIT_OK
        with open(tmp_path / "histogram.csv", newline="") as f:
            counts = [int(r["count"]) for r in csv.DictReader(f)]
        assert sum(counts) == 4 and counts[-3] == 4


class TestGradcheck:
    def test_passes(self, capsys) -> None:
        """Evaluation of exit code 0 and one line per parameter group."""
        assert cli.main(["gradcheck", "--cell", "janet", "--variant", "OR", "--seeds", "1"]) == cli.EXIT_OK
        assert "wh_f" in capsys.readouterr().out

    def test_corrupted_hook_raises(self) -> None:
        """Evaluation of GradcheckError naming the perturbed group."""

        def corrupt(grads):
            grads["b_f"] = grads["b_f"] + 1e-3
            return grads

        with pytest.raises(GradcheckError) as info:
            cli.run_gradcheck("gru", "UR", seeds=(0,), grad_hook=corrupt)
        assert "b_f" in info.value.failures

    def test_failure_exit_code(self, monkeypatch) -> None:
        """Evaluation of exit code 3 when the backward pass is wrong."""

        def corrupted_check(*args, **kwargs):
            kwargs["grad_hook"] = lambda g: {**g, "wx_f": g["wx_f"] * 1.05}
            return gradient_check(*args, **kwargs)

        monkeypatch.setattr(cli, "gradient_check", corrupted_check)
        assert cli.main(["gradcheck", "--seeds", "1"]) == cli.EXIT_GRADCHECK

    @pytest.mark.parametrize(
        "spelling", [["--variant=--"], ["--variant", "--"], ["--variant", "xx"], ["--variant", "-R"]]
    )
    def test_variants_with_dashes(self, spelling: list[str]) -> None:
        """Evaluation of the vanilla and refine-only variants reaching the checker."""
        assert cli.main(["gradcheck", "--cell", "lstm", *spelling, "--seeds", "1"]) == cli.EXIT_OK

    def test_variant_spelling(self) -> None:
        """Evaluation of the dash-free spellings of variant names."""
        assert cli.variant_arg("xx") == "--"
        assert cli.variant_arg("Ux") == "U-"
        assert cli.variant_arg("xR") == "-R"
        assert cli.variant_arg("UR") == "UR"
        assert cli.variant_arg("XX") == "XX"

    def test_unknown_variant(self) -> None:
        """Evaluation of exit code 1 for an unknown variant."""
        assert cli.main(["gradcheck", "--variant", "XX"]) == cli.EXIT_CONFIG


def test_gen_data(tmp_path) -> None:
    """Evaluation of exported batches reproducing the training data stream."""
    config = _write_config(tmp_path, task="adding", task_params={"length": 6})
    assert cli.main(["gen-data", "--config", config, "--batches", "2", "--batch-size", "3"]) == 0
    files = sorted((tmp_path / "run" / "data").glob("batch_*.npz"))
    assert [f.name for f in files] == ["batch_0000.npz", "batch_0001.npz"]
