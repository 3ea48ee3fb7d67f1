import argparse
import asyncio
import dataclasses
import json
import logging
import os
import sys
import tempfile
import time
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from .analysis import (
    SAMPLER_KINDS,
    TimescaleReport,
    gate_histogram,
    grad_norm_bounds,
    timescale_report,
    timescale_sampler,
    write_bounds_csv,
    write_contour_csv,
    write_histogram_csv,
    write_timescales_csv,
)
from .cells import CELL_KINDS, load_checkpoint, record_forget, save_checkpoint, unroll
from .config import ExperimentConfig, load_experiment
from .errors import ConfigError, DivergenceError, FormatError, GradcheckError, ShapeError
from .gatelib import VARIANT_NAMES, GateConfig
from .ndmath import STREAM_DATA, STREAM_PROBE, make_rng
from .tasks import make_task, save_batch
from .train import GradHook, MetricsRecord, build_network, gradient_check, train_loop

logger = logging.getLogger("urgate.cli")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_GRADCHECK = 3

METRIC_KEYS = ["step", "loss", "eval_loss", "variant", "seed"]
ANALYSIS_KINDS = ("histogram", "timescales", "samples", "contour", "bounds")


# --- Artifacts ---


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_metrics(out_dir: Path, records: list[MetricsRecord]) -> None:
    lines = "".join(json.dumps(r.to_json()) + "\n" for r in records)
    _atomic_write(out_dir / "metrics.jsonl", lines)
    rows = [",".join(METRIC_KEYS)]
    rows += [",".join(str(r.to_json()[k]) for k in METRIC_KEYS) for r in records]
    _atomic_write(out_dir / "metrics.csv", "\n".join(rows) + "\n")


def read_metrics(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _env_int(name: str) -> int | None:
    """Positive integer from the environment, or None when unset or empty."""
    raw = os.getenv(name, "").strip()
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{name}: expected a positive integer, got {raw!r}")
    return value


# --- Single run ---


def run_experiment(config: ExperimentConfig, variant: str | None = None) -> dict:
    """Train one (variant, seed) run and write its artifacts under ``config.output_dir``.

    Returns the run summary. Divergence is recorded in the summary and then
    re-raised so callers can choose the exit code.
    """
    variant = variant or config.variant
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gate = config.gate_config(variant)
    task = make_task(config.task, config.resolved_task_params(), config.hidden)
    train_cfg = config.train_config(task.base_train)
    eval_batch = _env_int("URGATE_EVAL_BATCH")
    if "eval_batch_size" not in config.train and eval_batch is not None:
        train_cfg = dataclasses.replace(train_cfg, eval_batch_size=eval_batch)
    net = build_network(task, config.cell, gate, config.hidden, train_cfg)
    meta = {"task": config.task, "step": 0, "seed": train_cfg.seed}
    save_checkpoint(out_dir / "checkpoints" / "init.npz", net.cell, net.head, meta)

    def on_snapshot(step: int, unit_means: np.ndarray) -> str:
        name = f"forget_means_step{step}.npy"
        path = out_dir / "snapshots" / name
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, unit_means)
        return name

    records: list[MetricsRecord] = []
    started = time.perf_counter()
    diverged: DivergenceError | None = None
    try:
        for rec in train_loop(task, net, train_cfg, variant, on_snapshot):
            records.append(rec)
    except DivergenceError as e:
        logger.warning(f"Run {variant} seed {train_cfg.seed} diverged at step {e.step}")
        diverged = e
    write_metrics(out_dir, records)
    if diverged is None:
        meta = {**meta, "step": records[-1].step}
        save_checkpoint(out_dir / "checkpoints" / "final.npz", net.cell, net.head, meta)
    eval_losses = [r.eval_loss for r in records]
    summary = {
        "variant": variant,
        "seed": train_cfg.seed,
        "cell": config.cell,
        "task": config.task,
        "steps": records[-1].step if records else 0,
        "best_loss": min(eval_losses) if eval_losses else None,
        "final_loss": eval_losses[-1] if eval_losses else None,
        "diverged": diverged is not None,
        "wall_time": time.perf_counter() - started,
    }
    _atomic_write(out_dir / "summary.json", json.dumps(summary, indent=2) + "\n")
    logger.info(f"Run {variant} seed {train_cfg.seed} finished; artifacts in {out_dir}")
    if diverged is not None:
        raise diverged
    return summary


# --- Sweep ---


def run_dir_name(variant: str, seed: int) -> str:
    """Filesystem-safe directory for one sweep run ("--" becomes "xx")."""
    return f"gate_{variant.replace('-', 'x')}_seed{seed}"


def aggregate(records: dict[tuple[str, int], list[dict]], quantiles: tuple[float, float]) -> list[tuple]:
    """Median and quantile band of eval loss per (step, variant) across seeds."""
    by_key: dict[tuple[int, str], list[float]] = {}
    for (variant, _), rows in records.items():
        for row in rows:
            by_key.setdefault((row["step"], variant), []).append(row["eval_loss"])
    out = []
    for (step, variant), values in sorted(by_key.items(), key=lambda kv: (VARIANT_NAMES.index(kv[0][1]), kv[0][0])):
        arr = np.asarray(values)
        out.append(
            (
                step,
                variant,
                float(np.median(arr)),
                float(np.quantile(arr, quantiles[0])),
                float(np.quantile(arr, quantiles[1])),
            )
        )
    return out


async def run_sweep(config: ExperimentConfig, workers: int | None = None) -> Path:
    """Run every (variant, seed) pair on worker threads, then aggregate.

    All runs share the data seed. A diverged run is recorded and the sweep
    continues.
    """
    if config.sweep is None:
        raise ConfigError("sweep: block missing from config")
    spec = config.sweep
    root = Path(config.output_dir)
    semaphore = asyncio.Semaphore(workers or _env_int("URGATE_THREADS") or os.cpu_count() or 1)

    async def one(variant: str, seed: int) -> tuple[tuple[str, int], bool]:
        run = config.with_overrides(seed=seed, output_dir=str(root / run_dir_name(variant, seed)), variant=variant)
        async with semaphore:
            try:
                await asyncio.to_thread(run_experiment, run, variant)
                return (variant, seed), False
            except DivergenceError:
                logger.warning(f"Sweep run {variant} seed {seed} diverged; continuing")
                return (variant, seed), True
            except Exception:
                logger.exception(f"Sweep run {variant} seed {seed} failed")
                raise

    results = await asyncio.gather(*(one(v, s) for v in spec.variants for s in spec.seeds))
    records = {
        key: read_metrics(root / run_dir_name(*key) / "metrics.jsonl") for key, _ in results
    }
    path = root / "aggregate.csv"
    rows = ["step,variant,median,q_lo,q_hi"]
    rows += [",".join(str(v) for v in row) for row in aggregate(records, spec.quantiles)]
    _atomic_write(path, "\n".join(rows) + "\n")
    diverged = sorted(f"{v}/{s}" for (v, s), d in results if d)
    summary = {"runs": len(results), "diverged": diverged, "quantiles": list(spec.quantiles)}
    _atomic_write(root / "sweep_summary.json", json.dumps(summary, indent=2) + "\n")
    logger.info(f"Sweep of {len(results)} runs aggregated into {path}")
    return path


# --- Analysis ---


def run_analysis(
    kind: str,
    out_dir: Path,
    source: Path | None = None,
    grid: int = 101,
    probe: bool = False,
    sampler: str | None = None,
    sampler_params: dict | None = None,
    n: int = 100_000,
) -> list[Path]:
    """Write the CSVs for one analysis kind.

    ``histogram`` and ``timescales`` read a ``.npy`` recording of shape
    (..., hidden) or a checkpoint. For a checkpoint the forget gates are
    taken at zero input and zero state (the gates set by the biases alone),
    or, with ``probe``, recorded over random input sequences. ``samples``
    draws decay periods from ``timescale_sampler``. ``contour`` and
    ``bounds`` need no input.
    """
    if kind == "contour":
        axis = np.linspace(0.0, 1.0, grid)
        return [write_contour_csv(out_dir / "contour.csv", axis, axis)]
    if kind == "bounds":
        g = np.linspace(0.0, 1.0, grid + 2)[1:-1]
        return [write_bounds_csv(out_dir / "bounds.csv", grad_norm_bounds(g))]
    if kind == "samples":
        if sampler is None:
            raise ConfigError("analysis 'samples' needs --sampler")
        try:
            periods = timescale_sampler(sampler, sampler_params, n, make_rng(0, STREAM_PROBE))
        except (KeyError, ValueError) as e:
            raise ConfigError(f"sampler {sampler!r}: {e}") from e
        report = TimescaleReport(periods, {})
        return [write_timescales_csv(out_dir / f"samples_{sampler}.csv", report)]
    if kind not in ("histogram", "timescales"):
        raise ConfigError(f"unknown analysis kind {kind!r}; valid kinds: {', '.join(ANALYSIS_KINDS)}")
    if source is None:
        raise ConfigError(f"analysis {kind!r} needs --input (checkpoint or .npy recording)")
    recording = load_recording(source, probe)
    if kind == "histogram":
        return [write_histogram_csv(out_dir / "histogram.csv", gate_histogram(recording))]
    return [write_timescales_csv(out_dir / "timescales.csv", timescale_report(recording))]


def load_recording(source: Path, probe: bool = False, batch: int = 64, length: int = 50) -> np.ndarray:
    """Forget activations (..., hidden) from a recording or a checkpoint."""
    if not source.exists():
        raise FormatError(f"missing input {source}")
    if source.suffix == ".npy":
        try:
            return np.load(source, allow_pickle=False)
        except ValueError as e:
            raise FormatError(f"corrupt recording {source}: {e}") from e
    params, _, _ = load_checkpoint(source)
    if probe:
        xs = make_rng(0, STREAM_PROBE).normal(size=(length, batch, params.input_dim))
    else:
        xs = np.zeros((1, 1, params.input_dim))
    _, caches, _ = unroll(params, xs)
    return record_forget(caches)


# --- Subcommands ---


def cmd_train(args: argparse.Namespace) -> int:
    config = _load(args)
    run_experiment(config)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _load(args)
    if args.seed is not None and config.sweep is not None:
        raise ConfigError("--seed cannot override a sweep's seed list")
    asyncio.run(run_sweep(config))
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    out_dir = Path(args.out or "runs/analysis")
    try:
        params = json.loads(args.params) if args.params else None
    except json.JSONDecodeError as e:
        raise ConfigError(f"--params: invalid JSON ({e})") from e
    paths = run_analysis(
        args.kind,
        out_dir,
        Path(args.input) if args.input else None,
        args.grid,
        probe=args.probe,
        sampler=args.sampler,
        sampler_params=params,
        n=args.n,
    )
    for p in paths:
        print(p)
    return EXIT_OK


def run_gradcheck(
    cell: str,
    variant: str,
    input_dim: int = 4,
    hidden: int = 8,
    length: int = 5,
    seeds: Sequence[int] = (0,),
    grad_hook: GradHook | None = None,
) -> dict[str, float]:
    """Worst relative error per parameter group over ``seeds``; raises ``GradcheckError``."""
    cfg = GateConfig.from_variant(variant)
    worst: dict[str, float] = {}
    failures: dict[str, float] = {}
    tolerance = 1e-4
    for seed in seeds:
        report = gradient_check(cell, cfg, input_dim, hidden, length, seed, grad_hook=grad_hook)
        tolerance = report.tolerance
        for name, err in report.errors.items():
            worst[name] = max(worst.get(name, 0.0), err)
        failures.update(report.failures())
    if failures:
        raise GradcheckError({k: worst[k] for k in failures}, tolerance)
    return worst


def cmd_gradcheck(args: argparse.Namespace) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    worst = run_gradcheck(args.cell, args.variant, args.input_dim, args.hidden, args.length, seeds)
    for name, err in sorted(worst.items()):
        print(f"{name:8s} {err:.3e}")
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _load(args)
    task = make_task(config.task, config.resolved_task_params(), config.hidden)
    rng = make_rng(config.seeds["data"], STREAM_DATA)
    out_dir = Path(config.output_dir) / "data"
    for k in range(args.batches):
        batch = task.sample(rng, args.batch_size)
        meta = {"task": config.task, "data_seed": config.seeds["data"], "index": k}
        print(save_batch(out_dir / f"batch_{k:04d}.npz", batch, meta))
    return EXIT_OK


def _load(args: argparse.Namespace) -> ExperimentConfig:
    config = load_experiment(args.config)
    return config.with_overrides(
        seed=args.seed,
        output_dir=args.out,
        deterministic=True if args.deterministic else None,
    )


def variant_arg(name: str) -> str:
    """Variant name from the command line; "xx", "Ux", "xR" etc. spell the ones containing "-"."""
    spelled = name.replace("x", "-")
    return spelled if name not in VARIANT_NAMES and spelled in VARIANT_NAMES else name


def _spell_variants(argv: list[str]) -> list[str]:
    # argparse reads "--" as end of options and "-R" as a flag.
    out = []
    for k, arg in enumerate(argv):
        if arg.startswith("--variant=") and arg[10:] in VARIANT_NAMES:
            arg = "--variant=" + arg[10:].replace("-", "x")
        elif k and argv[k - 1] == "--variant" and arg in VARIANT_NAMES:
            arg = arg.replace("-", "x")
        out.append(arg)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urgate", description="Gated recurrent cell experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment JSON document")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="init seed override")
        p.add_argument("--deterministic", action="store_true", help="force deterministic reductions")
        return p

    experiment("train", "train one run").set_defaults(func=cmd_train)
    experiment("sweep", "train every variant x seed and aggregate").set_defaults(func=cmd_sweep)
    gen = experiment("gen-data", "export generated batches as .npz")
    gen.add_argument("--batches", type=int, default=1)
    gen.add_argument("--batch-size", type=int, default=32)
    gen.set_defaults(func=cmd_gen_data)

    analyze = sub.add_parser("analyze", help="write analysis CSVs")
    analyze.add_argument("kind", choices=ANALYSIS_KINDS)
    analyze.add_argument("--input", help="checkpoint (.npz) or recording (.npy)")
    analyze.add_argument("--out", help="output directory")
    analyze.add_argument("--grid", type=int, default=101, help="points per grid axis")
    analyze.add_argument("--probe", action="store_true", help="record gates over random inputs")
    analyze.add_argument("--sampler", choices=SAMPLER_KINDS, help="initialization for samples")
    analyze.add_argument("--params", help='sampler parameters as JSON, e.g. {"t_max": 100}')
    analyze.add_argument("--n", type=int, default=100_000, help="number of samples")
    analyze.set_defaults(func=cmd_analyze)

    grad = sub.add_parser("gradcheck", help="compare BPTT gradients with finite differences")
    grad.add_argument("--cell", choices=CELL_KINDS, default="lstm")
    grad.add_argument("--variant", type=variant_arg, default="UR", help="gate variant; xx spells --")
    grad.add_argument("--input-dim", type=int, default=4)
    grad.add_argument("--hidden", type=int, default=8)
    grad.add_argument("--length", type=int, default=5)
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv(".env.local")
    logging.basicConfig(
        level=os.getenv("LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args = build_parser().parse_args(_spell_variants(list(sys.argv[1:] if argv is None else argv)))
    except SystemExit as e:
        # argparse exits with 2 on usage errors; 2 is reserved for divergence.
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except GradcheckError as e:
        print(str(e), file=sys.stderr)
        return EXIT_GRADCHECK
    except (ConfigError, FormatError, ShapeError, FileNotFoundError) as e:
        logger.debug("Input error", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
