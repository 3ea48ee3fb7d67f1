"""Losses, Adam, gradient clipping, the training loop and the gradient check."""

import logging
import time
from collections.abc import Callable, Iterator
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .cells import (
    CellParams,
    StateGrad,
    StepCache,
    init_cell_params,
    record_forget,
    unroll,
    unroll_backward,
)
from .config import TrainConfig
from .errors import DivergenceError, ShapeError
from .gatelib import GateConfig
from .ndmath import (
    STREAM_DATA,
    STREAM_EVAL,
    STREAM_INIT,
    STREAM_PROBE,
    all_finite,
    clip_by_global_norm,
    global_norm,
    make_rng,
)
from .tasks import Task, TaskBatch

logger = logging.getLogger("urgate.train")

EVAL_CHUNK = 128
HEAD_KEYS = ("head_w", "head_b")


# --- Losses ---


def _mask_count(mask: np.ndarray, lead: tuple[int, ...]) -> int:
    count = int(np.sum(mask)) * int(np.prod(lead))
    if count == 0:
        raise ValueError("loss mask selects no steps")
    return count


def cross_entropy_masked(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean negative log-likelihood over the steps selected by ``mask``.

    ``logits`` is (..., time, classes), ``targets`` (..., time) class ids and
    ``mask`` a boolean (time,) vector. Unmasked steps do not contribute.
    """
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape[-1] != mask.shape[0]:
        raise ShapeError(
            f"logits {logits.shape}, targets {targets.shape} and mask {mask.shape} disagree"
        )
    count = _mask_count(mask, targets.shape[:-1])
    logp = special.log_softmax(logits, axis=-1)
    nll = -np.take_along_axis(logp, targets[..., None].astype(np.int64), axis=-1)[..., 0]
    return float(np.sum(nll[..., mask]) / count)


def cross_entropy_masked_grad(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    count = _mask_count(mask, targets.shape[:-1])
    grad = special.softmax(logits, axis=-1)
    np.put_along_axis(
        grad,
        targets[..., None].astype(np.int64),
        np.take_along_axis(grad, targets[..., None].astype(np.int64), axis=-1) - 1.0,
        axis=-1,
    )
    return grad * mask[:, None] / count


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Squared error averaged over every entry (batch and scored steps)."""
    return float(np.mean(np.square(np.asarray(pred) - np.asarray(target))))


def mse_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    diff = np.asarray(pred) - np.asarray(target)
    return 2.0 * diff / diff.size


# --- Adam ---


@dataclass
class AdamMoments:
    """First and second moment estimates, keyed like the parameters."""

    ms: dict[str, np.ndarray]
    vs: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "AdamMoments":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: AdamMoments,
    t: int,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamMoments]:
    """One bias-corrected Adam update at step ``t`` (1-based)."""
    if t < 1:
        raise ValueError(f"adam step counter must be >= 1, got {t}")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, ms, vs = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * moments.ms[k] + (1.0 - b1) * g
        v = b2 * moments.vs[k] + (1.0 - b2) * np.square(g)
        new_params[k] = p - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        ms[k] = m
        vs[k] = v
    return new_params, AdamMoments(ms, vs)


# --- Network ---


@dataclass
class Network:
    """A recurrent cell followed by a linear readout applied at scored steps.

    The head maps hidden states to ``output_dim`` logits (classification) or
    to one scalar (regression).
    """

    cell: CellParams
    head: dict[str, np.ndarray]

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.cell.tensors, **self.head}

    def assign(self, params: dict[str, np.ndarray]) -> None:
        self.cell.tensors = {k: params[k] for k in self.cell.tensors}
        self.head = {k: params[k] for k in HEAD_KEYS}


def build_network(task: Task, kind: str, gate: GateConfig, hidden: int, cfg: TrainConfig) -> Network:
    """Fresh network for ``task``; every draw comes from the init stream of ``cfg.seed``."""
    dtype = np.dtype(cfg.precision)
    rng = make_rng(cfg.seed, STREAM_INIT)
    cell = init_cell_params(
        kind, gate, task.input_dim, hidden, rng, dtype, bias_override=task.bias_override
    )
    lim = np.sqrt(3.0 / hidden)
    head = {
        "head_w": rng.uniform(-lim, lim, (task.output_dim, hidden)).astype(dtype),
        "head_b": np.zeros(task.output_dim, dtype=dtype),
    }
    return Network(cell, head)


def forward(net: Network, batch: TaskBatch) -> tuple[float, np.ndarray, list[StepCache], np.ndarray]:
    """Returns loss, logits (time, batch, out), step caches and hidden states."""
    xs = np.swapaxes(batch.inputs, 0, 1)
    _, caches, hs = unroll(net.cell, xs)
    logits = hs @ net.head["head_w"].T + net.head["head_b"]
    if batch.objective == "xent":
        loss = cross_entropy_masked(np.swapaxes(logits, 0, 1), batch.targets, batch.mask)
    else:
        pred = logits[batch.mask, :, 0]
        loss = mse_loss(pred, batch.targets[:, batch.mask].T)
    return loss, logits, caches, hs


def loss_and_grads(net: Network, batch: TaskBatch) -> tuple[float, dict[str, np.ndarray], list[StepCache]]:
    """Loss and end-to-end gradients for every network parameter."""
    loss, logits, caches, hs = forward(net, batch)
    if batch.objective == "xent":
        d_logits = np.swapaxes(
            cross_entropy_masked_grad(np.swapaxes(logits, 0, 1), batch.targets, batch.mask), 0, 1
        )
    else:
        d_logits = np.zeros_like(logits)
        d_logits[batch.mask, :, 0] = mse_loss_grad(
            logits[batch.mask, :, 0], batch.targets[:, batch.mask].T
        )
    grads, _, _ = unroll_backward(caches, d_logits @ net.head["head_w"])
    grads["head_w"] = np.einsum("tbk,tbh->kh", d_logits, hs)
    grads["head_b"] = d_logits.sum(axis=(0, 1))
    return loss, grads, caches


# --- Training loop ---


@dataclass
class MetricsRecord:
    step: int
    loss: float
    eval_loss: float
    wall_clock: float
    snapshot: str | None = None
    variant: str = ""
    seed: int = 0

    def to_json(self) -> dict:
        """The persisted view; wall-clock is left out so reruns compare equal."""
        return {
            "step": self.step,
            "loss": self.loss,
            "eval_loss": self.eval_loss,
            "variant": self.variant,
            "seed": self.seed,
        }


SnapshotHook = Callable[[int, np.ndarray], str | None]


def _chunk_stats(net: Network, batch: TaskBatch, lo: int, hi: int, want_gates: bool):
    chunk = TaskBatch(batch.inputs[lo:hi], batch.targets[lo:hi], batch.mask, batch.objective)
    loss, _, caches, _ = forward(net, chunk)
    gates = record_forget(caches).sum(axis=(0, 1)) if want_gates else None
    return hi - lo, loss, gates


def evaluate(
    net: Network, batch: TaskBatch, deterministic: bool = True, want_gates: bool = False
) -> tuple[float, np.ndarray | None]:
    """Loss on ``batch`` in chunks; optionally the per-unit mean forget activation.

    Deterministic mode reduces the chunks in order. Otherwise chunks run on a
    thread pool and are summed as they complete.
    """
    n = len(batch.inputs)
    bounds = [(lo, min(lo + EVAL_CHUNK, n)) for lo in range(0, n, EVAL_CHUNK)]
    if deterministic or len(bounds) == 1:
        results = [_chunk_stats(net, batch, lo, hi, want_gates) for lo, hi in bounds]
    else:
        with ThreadPoolExecutor() as pool:
            futures = [pool.submit(_chunk_stats, net, batch, lo, hi, want_gates) for lo, hi in bounds]
            results = [f.result() for f in as_completed(futures)]
    total = sum(size * loss for size, loss, _ in results) / n
    gates = None
    if want_gates:
        steps = batch.inputs.shape[1]
        gates = sum(g for _, _, g in results) / (n * steps)
    return float(total), gates


def train_loop(
    task: Task,
    net: Network,
    cfg: TrainConfig,
    variant: str = "",
    on_snapshot: SnapshotHook | None = None,
) -> Iterator[MetricsRecord]:
    """Train ``net`` in place, yielding one record at step 0 and every eval interval.

    Each step draws a fresh batch from the data stream of ``cfg.data_seed``,
    backpropagates the masked loss through time, clips the global gradient
    norm and applies Adam. Evaluation uses one fresh batch from the separate
    evaluation stream. Raises ``DivergenceError`` on a non-finite loss.
    """
    data_rng = make_rng(cfg.data_seed, STREAM_DATA)
    eval_rng = make_rng(cfg.data_seed, STREAM_EVAL)
    dtype = np.dtype(cfg.precision)
    params = net.parameters()
    moments = AdamMoments.zeros(params)
    started = time.perf_counter()
    logger.info(
        f"Training {net.cell.kind} {variant or net.cell.cfg.variant} on {task.name}: "
        f"{cfg.steps} steps, batch {cfg.batch_size}, lr {cfg.learning_rate}"
    )

    def record(step: int, train_loss: float | None) -> MetricsRecord:
        final = step in (0, cfg.steps)
        eval_batch = task.sample(eval_rng, cfg.eval_batch_size)
        eval_loss, unit_means = evaluate(net, _cast(eval_batch, dtype), cfg.deterministic, final)
        if not np.isfinite(eval_loss):
            logger.warning(f"Evaluation loss is {eval_loss} at step {step}")
            raise DivergenceError(step, eval_loss)
        snapshot = on_snapshot(step, unit_means) if on_snapshot and final else None
        rec = MetricsRecord(
            step,
            eval_loss if train_loss is None else train_loss,
            eval_loss,
            time.perf_counter() - started,
            snapshot,
            variant,
            cfg.seed,
        )
        logger.info(f"step {step}: loss {rec.loss:.5f}, eval {rec.eval_loss:.5f}")
        return rec

    yield record(0, None)
    window: list[float] = []
    for step in range(1, cfg.steps + 1):
        batch = _cast(task.sample(data_rng, cfg.batch_size), dtype)
        loss, grads, _ = loss_and_grads(net, batch)
        if not np.isfinite(loss) or not all_finite(*grads.values()):
            logger.warning(f"Non-finite loss or gradient at step {step}")
            raise DivergenceError(step, loss)
        grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
        params, moments = adam_step(params, grads, moments, step, cfg)
        net.assign(params)
        window.append(loss)
        logger.debug(f"step {step}: loss {loss:.6f}, grad norm {norm:.4f}")
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            yield record(step, float(np.mean(window)))
            window = []


def _cast(batch: TaskBatch, dtype: np.dtype) -> TaskBatch:
    if batch.inputs.dtype == dtype:
        return batch
    targets = batch.targets if batch.objective == "xent" else batch.targets.astype(dtype)
    return TaskBatch(batch.inputs.astype(dtype), targets, batch.mask, batch.objective)


# --- Gradient check ---


GradHook = Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]]


@dataclass
class GradcheckReport:
    kind: str
    variant: str
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    downsize: int = 1

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def failures(self) -> dict[str, float]:
        return {k: e for k, e in self.errors.items() if e >= self.tolerance}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def gradient_check(
    kind: str,
    cfg: GateConfig,
    input_dim: int = 4,
    hidden: int = 8,
    length: int = 5,
    seed: int = 0,
    batch: int = 2,
    delta: float = 1e-5,
    tolerance: float = 1e-4,
    grad_hook: GradHook | None = None,
) -> GradcheckReport:
    """Compare BPTT gradients with central differences on a random probe loss.

    The probe loss is sum_t <P_t, h_t> (plus <Q, c_T> for the LSTM) with fixed
    random weights P and Q. Biases get a little noise so that zero-bias
    initializations do not sit on symmetric points. Always runs in float64.
    """
    cfg.validate(hidden)
    rng = make_rng(seed, STREAM_PROBE)
    params = init_cell_params(kind, cfg, input_dim, hidden, make_rng(seed, STREAM_INIT), np.float64)
    for name, value in params.tensors.items():
        if name.startswith("b_"):
            params.tensors[name] = value + rng.normal(0.0, 0.1, value.shape)
    xs = rng.normal(size=(length, batch, input_dim))
    P = rng.normal(size=(length, batch, hidden))
    Q = rng.normal(size=(batch, hidden)) if kind == "lstm" else None

    def probe(p: CellParams) -> float:
        states, _, hs = unroll(p, xs)
        value = float(np.sum(P * hs))
        if Q is not None:
            value += float(np.sum(Q * states[-1].c))
        return value

    _, caches, _ = unroll(params, xs)
    d_final = StateGrad(np.zeros((batch, hidden)), Q) if Q is not None else None
    analytic, _, _ = unroll_backward(caches, P, d_final)
    if grad_hook is not None:
        analytic = grad_hook(analytic)

    report = GradcheckReport(kind, cfg.variant, tolerance, downsize=cfg.downsize)
    for name, tensor in params.tensors.items():
        numeric = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + delta
            up = probe(params)
            flat[j] = saved - delta
            down = probe(params)
            flat[j] = saved
            numeric.reshape(-1)[j] = (up - down) / (2.0 * delta)
        report.errors[name] = relative_error(analytic[name], numeric)
    logger.debug(
        f"gradcheck {kind}/{cfg.variant} seed {seed}: worst {report.worst:.2e} "
        f"(norm {global_norm(analytic):.3f})"
    )
    return report
