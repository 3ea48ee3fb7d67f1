import dataclasses

import numpy as np
import pytest

from urgate.cells import CELL_KINDS
from urgate.config import TrainConfig
from urgate.errors import DivergenceError
from urgate.gatelib import VARIANT_NAMES, GateConfig
from urgate.ndmath import clip_by_global_norm, global_norm, make_rng
from urgate.tasks import TaskBatch, make_task
from urgate.train import (
    AdamMoments,
    adam_step,
    build_network,
    cross_entropy_masked,
    cross_entropy_masked_grad,
    gradient_check,
    loss_and_grads,
    mse_loss,
    train_loop,
)

SMALL = TrainConfig(batch_size=4, steps=6, eval_interval=3, eval_batch_size=8)


class TestLosses:
    def test_uniform_logits_give_log8(self) -> None:
        """Evaluation of the copy baseline loss log 8."""
        logits = np.zeros((2, 3, 8))
        targets = np.zeros((2, 3), dtype=int)
        mask = np.array([False, True, True])
        np.testing.assert_allclose(cross_entropy_masked(logits, targets, mask), np.log(8.0))

    def test_correct_logits_give_zero(self) -> None:
        """Evaluation of a confident, correct prediction."""
        logits = np.full((1, 2, 4), -50.0)
        logits[0, :, 2] = 50.0
        loss = cross_entropy_masked(logits, np.full((1, 2), 2), np.ones(2, dtype=bool))
        assert loss < 1e-12

    def test_mean_over_masked_steps(self) -> None:
        """Evaluation of the mean over two masked steps, ignoring the rest."""
        logits = np.zeros((1, 3, 2))
        logits[0, 0] = [5.0, -5.0]
        logits[0, 2] = [0.0, np.log(3.0)]
        targets = np.array([[1, 0, 1]])
        a = -np.log(0.5)
        b = -np.log(0.75)
        loss = cross_entropy_masked(logits, targets, np.array([False, True, True]))
        np.testing.assert_allclose(loss, (a + b) / 2)

    def test_empty_mask(self) -> None:
        """Evaluation of the error for a mask that selects nothing."""
        with pytest.raises(ValueError):
            cross_entropy_masked(np.zeros((1, 2, 3)), np.zeros((1, 2), dtype=int), np.zeros(2, dtype=bool))

    def test_cross_entropy_gradient(self) -> None:
        """Evaluation of the analytic logit gradient against central differences."""
        rng = np.random.default_rng(42)
        logits = rng.normal(size=(2, 3, 4))
        targets = rng.integers(0, 4, size=(2, 3))
        mask = np.array([True, False, True])
        grad = cross_entropy_masked_grad(logits, targets, mask)
        numeric = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            e = np.zeros_like(logits)
            e[idx] = 1e-6
            numeric[idx] = (
                cross_entropy_masked(logits + e, targets, mask) - cross_entropy_masked(logits - e, targets, mask)
            ) / 2e-6
        np.testing.assert_allclose(grad, numeric, atol=1e-8)
        np.testing.assert_array_equal(grad[:, 1], 0.0)

    def test_mse(self) -> None:
        """Evaluation of squared error examples."""
        assert mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
        assert mse_loss(np.array([0.5]), np.array([0.0])) == 0.25


class TestAdam:
    def test_zero_gradient(self) -> None:
        """Evaluation of a zero gradient: parameters fixed, moments decay."""
        params = {"w": np.array([1.0, -2.0])}
        moments = AdamMoments({"w": np.array([0.1, 0.1])}, {"w": np.array([0.01, 0.01])})
        new, m = adam_step(params, {"w": np.zeros(2)}, moments, 5, TrainConfig(learning_rate=0.0))
        np.testing.assert_array_equal(new["w"], params["w"])
        np.testing.assert_allclose(m.ms["w"], 0.09)
        np.testing.assert_allclose(m.vs["w"], 0.01 * 0.999)

    def test_first_step_moves_by_lr(self) -> None:
        """Evaluation of the first bias-corrected step: |dw| = lr |g| / (|g| + eps)."""
        params = {"w": np.array([0.0, 0.0])}
        g = np.array([3.0, -0.2])
        cfg = TrainConfig(learning_rate=1e-3)
        new, _ = adam_step(params, {"w": g}, AdamMoments.zeros(params), 1, cfg)
        np.testing.assert_allclose(np.abs(new["w"]), 1e-3 * np.abs(g) / (np.abs(g) + 1e-8), rtol=1e-12)
        assert np.all(np.sign(new["w"]) == -np.sign(g))

    def test_quadratic_converges(self) -> None:
        """Evaluation of 100 steps on w^2 from w=1 at lr 0.1."""
        params = {"w": np.array([1.0])}
        moments = AdamMoments.zeros(params)
        cfg = TrainConfig(learning_rate=0.1)
        for t in range(1, 101):
            params, moments = adam_step(params, {"w": 2 * params["w"]}, moments, t, cfg)
        assert abs(params["w"][0]) < 0.05

    def test_step_counter(self) -> None:
        """Evaluation of the error for t < 1."""
        with pytest.raises(ValueError):
            adam_step({}, {}, AdamMoments({}, {}), 0, TrainConfig())


def _copy_net(variant: str = "UR", hidden: int = 8, cfg: TrainConfig = SMALL):
    task = make_task("copy", {"length": 5}, hidden)
    return task, build_network(task, "lstm", GateConfig.from_variant(variant), hidden, cfg)


class TestNetwork:
    def test_copy_loss_ignores_filler(self) -> None:
        """Evaluation of the copy loss being unchanged by the unscored targets."""
        task, net = _copy_net()
        batch = task.sample(make_rng(0), 4)
        loss, _, _ = loss_and_grads(net, batch)
        scrambled = batch.targets.copy()
        scrambled[:, ~batch.mask] = 7
        other = TaskBatch(batch.inputs, scrambled, batch.mask, batch.objective)
        assert loss_and_grads(net, other)[0] == loss

    @pytest.mark.parametrize("task_name", ["copy", "adding"])
    def test_end_to_end_gradients(self, task_name: str) -> None:
        """Evaluation of network gradients (cell and readout) against central differences."""
        task = make_task(task_name, {"length": 4}, 5)
        net = build_network(task, "gru", GateConfig.from_variant("UR"), 5, SMALL)
        batch = task.sample(make_rng(3), 2)
        _, grads, _ = loss_and_grads(net, batch)
        params = net.parameters()
        for name in ("wh_f", "b_s", "head_w", "head_b"):
            flat = params[name].reshape(-1)
            for j in range(min(flat.size, 6)):
                saved = flat[j]
                flat[j] = saved + 1e-6
                up = loss_and_grads(net, batch)[0]
                flat[j] = saved - 1e-6
                down = loss_and_grads(net, batch)[0]
                flat[j] = saved
                np.testing.assert_allclose(grads[name].reshape(-1)[j], (up - down) / 2e-6, atol=1e-7)


class TestTrainLoop:
    def test_records(self) -> None:
        """Evaluation of the record schedule: step 0, each interval and the last step."""
        task, net = _copy_net(cfg=dataclasses.replace(SMALL, steps=7))
        snaps = []
        records = list(
            train_loop(task, net, dataclasses.replace(SMALL, steps=7), "UR", lambda s, m: snaps.append((s, m)) or f"s{s}")
        )
        assert [r.step for r in records] == [0, 3, 6, 7]
        assert records[0].loss == records[0].eval_loss
        assert [r.snapshot for r in records] == ["s0", None, None, "s7"]
        assert [s for s, _ in snaps] == [0, 7]
        assert snaps[0][1].shape == (8,)
        assert set(records[0].to_json()) == {"step", "loss", "eval_loss", "variant", "seed"}

    def test_deterministic_reruns(self) -> None:
        """Evaluation of identical metric streams for identical seeds."""
        runs = []
        for _ in range(2):
            task, net = _copy_net()
            runs.append([r.to_json() for r in train_loop(task, net, SMALL, "UR")])
        assert runs[0] == runs[1]

    def test_variants_share_data(self) -> None:
        """Evaluation of the training batches being independent of the gate variant."""
        seen = {}
        for variant in ("--", "UM"):
            task, net = _copy_net(variant)
            batches = []
            sample = task.sample
            task.sample = lambda rng, b, sample=sample, batches=batches: batches.append(sample(rng, b)) or batches[-1]
            list(train_loop(task, net, SMALL, variant))
            seen[variant] = batches
        assert len(seen["--"]) == len(seen["UM"])
        for a, b in zip(seen["--"], seen["UM"]):
            np.testing.assert_array_equal(a.inputs, b.inputs)

    def test_zero_learning_rate_is_static(self) -> None:
        """Evaluation of constant parameters and eval loss at lr 0."""
        cfg = dataclasses.replace(SMALL, learning_rate=0.0)
        task, net = _copy_net(cfg=cfg)
        before = {k: v.copy() for k, v in net.parameters().items()}
        records = list(train_loop(task, net, cfg))
        for k, v in net.parameters().items():
            np.testing.assert_array_equal(v, before[k])
        # Eval batches differ per interval, but the network does not.
        assert all(np.isfinite(r.eval_loss) for r in records)

    def test_clip_bound_holds_on_real_gradients(self) -> None:
        """Evaluation of the post-clip global norm bound on a training gradient."""
        task, net = _copy_net()
        _, grads, _ = loss_and_grads(net, task.sample(make_rng(0), 4))
        clipped, _ = clip_by_global_norm(grads, 1e-3)
        assert global_norm(clipped) <= 1e-3 + 1e-9

    def test_divergence(self) -> None:
        """Evaluation of the abort on a non-finite loss."""
        task, net = _copy_net()
        net.head["head_w"][:] = np.nan
        with pytest.raises(DivergenceError, match="diverged"):
            list(train_loop(task, net, SMALL))

    def test_nondeterministic_eval_matches(self) -> None:
        """Evaluation of threaded chunked evaluation against the ordered reduction."""
        cfg = dataclasses.replace(SMALL, eval_batch_size=300, steps=1, eval_interval=1)
        task, net = _copy_net(cfg=cfg)
        a = next(iter(train_loop(task, net, cfg)))
        task, net = _copy_net(cfg=cfg)
        b = next(iter(train_loop(task, net, dataclasses.replace(cfg, deterministic=False))))
        np.testing.assert_allclose(a.eval_loss, b.eval_loss, rtol=1e-12)


class TestGradientCheck:
    @pytest.mark.parametrize("kind", CELL_KINDS)
    @pytest.mark.parametrize("variant", VARIANT_NAMES)
    def test_all_cells_and_variants(self, kind: str, variant: str) -> None:
        """Evaluation of BPTT gradients against central differences for every cell and variant."""
        for seed in range(5):
            report = gradient_check(kind, GateConfig.from_variant(variant), seed=seed)
            assert report.passed, report.errors

    @pytest.mark.parametrize("kind", CELL_KINDS)
    @pytest.mark.parametrize("variant", ["OM", "UM"])
    @pytest.mark.parametrize("downsize", [1, 2, 4])
    def test_master_downsize_is_honored(self, kind: str, variant: str, downsize: int) -> None:
        """Evaluation of master variants at the requested chunk size, labelled as requested."""
        cfg = GateConfig.from_variant(variant, downsize=downsize)
        report = gradient_check(kind, cfg)
        assert report.passed, report.errors
        assert (report.variant, report.downsize) == (variant, downsize)

    def test_corrupted_backward_is_caught(self) -> None:
        """Evaluation of the negative control: a perturbed gradient fails."""

        def corrupt(grads):
            grads["wh_f"] = grads["wh_f"] * 1.01
            return grads

        report = gradient_check("lstm", GateConfig.from_variant("UR"), grad_hook=corrupt)
        assert not report.passed
        assert "wh_f" in report.failures()
