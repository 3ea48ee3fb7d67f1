"""Gate activation histograms, timescale math, gradient-norm bounds and
effective-gate contours. Every result can be written as CSV for plotting."""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .errors import ShapeError
from .gatelib import decay_period_of_bias, master_compose, refine_compose, refine_grad_norm
from .ndmath import Rng, cumax, rng_uniform, sigmoid

logger = logging.getLogger("urgate.analysis")

HISTOGRAM_BINS = 50
BIMODAL_BAND = (0.2, 0.8)
BOUNDS_GRID = 1024
BOUNDS_XTOL = 1e-6
REPORT_QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)
SAMPLER_KINDS = ("constant", "chrono", "uniform", "cumax", "chrono_free")


# --- Histograms ---


@dataclass
class GateHistogram:
    edges: np.ndarray
    counts: np.ndarray
    unit_means: np.ndarray


def gate_histogram(recording: np.ndarray, bins: int = HISTOGRAM_BINS) -> GateHistogram:
    """Average each unit over every leading axis (samples, time) and bin the means on [0, 1]."""
    recording = np.asarray(recording, dtype=np.float64)
    if recording.size == 0:
        raise ShapeError("empty recording")
    means = recording.reshape(-1, recording.shape[-1]).mean(axis=0)
    counts, edges = np.histogram(np.clip(means, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return GateHistogram(edges, counts, means)


def bimodality_fraction(unit_means: np.ndarray, band: tuple[float, float] = BIMODAL_BAND) -> float:
    """Share of units whose mean activation lies outside ``band``."""
    unit_means = np.asarray(unit_means)
    if unit_means.size == 0:
        raise ShapeError("empty recording")
    lo, hi = band
    return float(np.mean((unit_means < lo) | (unit_means > hi)))


def uniform_init_ks(unit_means: np.ndarray, hidden: int | None = None) -> float:
    """KS p-value of unit means against U[1/d, 1-1/d]."""
    unit_means = np.asarray(unit_means)
    d = hidden or unit_means.shape[-1]
    if d < 3:
        raise ValueError(f"need at least 3 units for a non-degenerate range, got {d}")
    return float(stats.kstest(unit_means, "uniform", args=(1.0 / d, 1.0 - 2.0 / d)).pvalue)


# --- Timescales ---


def decay_period(f):
    """D = 1/(1-f): steps for a unit's memory to decay by a constant factor."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f >= 1.0):
        raise ValueError("infinite timescale: forget activation of 1")
    if np.any(f < 0.0):
        raise ValueError("forget activation must be >= 0")
    out = 1.0 / (1.0 - f)
    return float(out) if out.ndim == 0 else out


def refine_timescale_band(D: float) -> tuple[float, float]:
    """Timescales reachable by refining a gate with decay period ``D``."""
    if D < 1:
        raise ValueError(f"decay period must be >= 1, got {D}")
    return D / 2.0, D * D


@dataclass
class TimescaleReport:
    periods: np.ndarray
    quantiles: dict[float, float]

    def rows(self) -> list[tuple[int, float]]:
        return list(enumerate(self.periods.tolist()))


def timescale_report(forget: np.ndarray, quantiles=REPORT_QUANTILES) -> TimescaleReport:
    """Per-unit decay periods from forget activations (any leading axes are averaged)."""
    forget = np.asarray(forget, dtype=np.float64)
    if forget.size == 0:
        raise ShapeError("empty recording")
    periods = decay_period(forget.reshape(-1, forget.shape[-1]).mean(axis=0))
    periods = np.atleast_1d(periods)
    return TimescaleReport(periods, {q: float(np.quantile(periods, q)) for q in quantiles})


def _chrono_free_pmf(k_max: int) -> np.ndarray:
    k = np.arange(1, k_max + 1, dtype=np.float64)
    weights = 1.0 / (k * np.log(k + 1.0) ** 2)
    return weights / weights.sum()


def timescale_sampler(kind: str, params: dict | None, n: int, rng: Rng) -> np.ndarray:
    """Draw ``n`` decay periods implied by an initialization scheme.

    - ``constant``: ``{"bias": b}``, a point mass at 1 + e^b.
    - ``chrono``: ``{"t_max": T}``, uniform on [2, T].
    - ``uniform``: activations from U(eps, 1-eps) (``{"eps": ...}``, default 0),
      decay periods with survival function 1/x.
    - ``cumax``: a random unit of the zero-input cumax gate over ``{"hidden": n}`` units.
    - ``chrono_free``: chrono with an unknown horizon, P(T=k) proportional to
      1/(k log^2(k+1)) on 1..k_max (``{"k_max": ...}``, default 10^5).
    """
    params = params or {}
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if kind == "constant":
        return np.full(n, decay_period_of_bias(float(params.get("bias", 1.0))))
    if kind == "chrono":
        t_max = int(params["t_max"])
        if t_max < 2:
            raise ValueError(f"t_max must be >= 2, got {t_max}")
        if t_max == 2:
            return np.full(n, 2.0)
        return 1.0 + rng_uniform(rng, 1.0, t_max - 1.0, n)
    if kind == "uniform":
        eps = float(params.get("eps", 0.0))
        return decay_period(rng_uniform(rng, eps, 1.0 - eps, n))
    if kind == "cumax":
        hidden = int(params.get("hidden", 1024))
        # The last unit is always fully open; it has no finite period.
        levels = cumax(np.zeros(hidden))[:-1]
        return decay_period(levels[rng.integers(0, hidden - 1, size=n)])
    if kind == "chrono_free":
        k_max = int(params.get("k_max", 100_000))
        T = rng.choice(np.arange(1, k_max + 1), size=n, p=_chrono_free_pmf(k_max))
        return 1.0 + T.astype(np.float64)
    raise ValueError(f"unknown timescale sampler {kind!r}; valid kinds: {', '.join(SAMPLER_KINDS)}")


def master_gate_sum_mean(hidden: int, draws: int, rng: Rng, scale: float = 1.0) -> float:
    """Monte-Carlo mean of the unit-averaged f_hat + i_hat at master-gate initialization.

    Fine and master gates see independent Gaussian pre-activations with
    standard deviation ``scale``; the input master gate is 1 - cumax.
    """
    sums = np.empty(draws)
    for k in range(draws):
        z = rng.normal(0.0, scale, size=(4, hidden))
        f, i = sigmoid(z[0]), sigmoid(z[1])
        mf, mi = cumax(z[2]), 1.0 - cumax(z[3])
        f_hat, i_hat, _ = master_compose(f, i, mf, mi)
        sums[k] = np.mean(f_hat + i_hat)
    return float(sums.mean())


# --- Gradient bounds and contours ---


@dataclass
class GradBounds:
    g: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    standard: np.ndarray


def admissible_f(g: float) -> tuple[float, float]:
    """Range of main gate values able to reach effective value ``g``."""
    return 1.0 - np.sqrt(1.0 - g), np.sqrt(g)


def _refine_extremum(fn, fs: np.ndarray, values: np.ndarray, idx: int) -> tuple[float, float]:
    lo = fs[max(idx - 1, 0)]
    hi = fs[min(idx + 1, len(fs) - 1)]
    if hi <= lo:
        return float(fs[idx]), float(values[idx])
    res = optimize.minimize_scalar(fn, bounds=(lo, hi), method="bounded", options={"xatol": BOUNDS_XTOL})
    if res.fun < values[idx]:
        return float(res.x), float(res.fun)
    return float(fs[idx]), float(values[idx])


def grad_norm_bounds(g_grid) -> GradBounds:
    """Min and max of the refine-gate gradient norm over every admissible f.

    A dense grid over [1-sqrt(1-g), sqrt(g)] locates the extrema, which are
    then refined by a bounded golden-section search. ``standard`` is the
    plain sigmoid gradient g(1-g).
    """
    g_grid = np.atleast_1d(np.asarray(g_grid, dtype=np.float64))
    if np.any((g_grid <= 0.0) | (g_grid >= 1.0)):
        raise ValueError("g must lie strictly inside (0, 1)")
    lower = np.empty_like(g_grid)
    upper = np.empty_like(g_grid)
    for k, g in enumerate(g_grid):
        f_lo, f_hi = admissible_f(g)
        # f = g is the r = 0.5 path; keep it on the grid.
        fs = np.union1d(np.linspace(f_lo, f_hi, BOUNDS_GRID), [g])
        values = refine_grad_norm(fs, np.full_like(fs, g))
        _, lower[k] = _refine_extremum(
            lambda f, g=g: refine_grad_norm(f, g), fs, values, int(np.argmin(values))
        )
        _, neg = _refine_extremum(
            lambda f, g=g: -refine_grad_norm(f, g), fs, -values, int(np.argmax(values))
        )
        upper[k] = -neg
    return GradBounds(g_grid, lower, upper, g_grid * (1.0 - g_grid))


def g_contour(f_grid, r_grid) -> np.ndarray:
    """Effective gate values; row ``k`` holds ``refine_compose(f_grid, r_grid[k])``."""
    f_grid = np.asarray(f_grid, dtype=np.float64)
    r_grid = np.asarray(r_grid, dtype=np.float64)
    for name, grid in (("f", f_grid), ("r", r_grid)):
        if np.any((grid < 0.0) | (grid > 1.0)):
            raise ValueError(f"{name} grid must lie within [0, 1]")
    F, R = np.meshgrid(f_grid, r_grid)
    return refine_compose(F, R)


# --- CSV output ---


def _write_rows(path: str | Path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    logger.info(f"Wrote {path}")
    return path


def write_histogram_csv(path: str | Path, hist: GateHistogram) -> Path:
    rows = zip(hist.edges[:-1].tolist(), hist.edges[1:].tolist(), hist.counts.tolist())
    return _write_rows(path, ["bin_lo", "bin_hi", "count"], rows)


def write_contour_csv(path: str | Path, f_grid, r_grid) -> Path:
    G = g_contour(f_grid, r_grid)
    rows = (
        (float(f), float(r), float(G[k, j]))
        for k, r in enumerate(np.asarray(r_grid))
        for j, f in enumerate(np.asarray(f_grid))
    )
    return _write_rows(path, ["f", "r", "g"], rows)


def write_bounds_csv(path: str | Path, bounds: GradBounds) -> Path:
    rows = zip(bounds.g.tolist(), bounds.lower.tolist(), bounds.upper.tolist(), bounds.standard.tolist())
    return _write_rows(path, ["g", "min", "max", "standard"], rows)


def write_timescales_csv(path: str | Path, report: TimescaleReport) -> Path:
    return _write_rows(path, ["unit", "decay_period"], report.rows())
