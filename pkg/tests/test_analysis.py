import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from urgate.analysis import (
    bimodality_fraction,
    decay_period,
    g_contour,
    gate_histogram,
    grad_norm_bounds,
    master_gate_sum_mean,
    refine_timescale_band,
    timescale_report,
    timescale_sampler,
    uniform_init_ks,
    write_contour_csv,
    write_histogram_csv,
)
from urgate.cells import init_cell_params, record_forget, unroll
from urgate.errors import ShapeError
from urgate.gatelib import GateConfig, refine_grad_norm
from urgate.ndmath import make_rng, sigmoid


class TestHistogram:
    def test_constant_recording(self) -> None:
        """Evaluation of a constant recording: one occupied bin holding every unit."""
        hist = gate_histogram(np.full((4, 10, 16), 0.7))
        assert hist.counts.sum() == 16
        assert np.count_nonzero(hist.counts) == 1
        k = int(np.argmax(hist.counts))
        assert hist.edges[k] <= 0.7 < hist.edges[k + 1]
        np.testing.assert_allclose(hist.unit_means, 0.7)

    def test_two_units(self) -> None:
        """Evaluation of two units with different means."""
        rec = np.stack([np.full((3, 5), 0.1), np.full((3, 5), 0.9)], axis=-1)
        hist = gate_histogram(rec)
        assert np.count_nonzero(hist.counts) == 2
        assert len(hist.edges) == 51

    def test_permutation_invariance(self) -> None:
        """Evaluation of invariance to shuffling batch and time."""
        rng = np.random.default_rng(42)
        rec = rng.uniform(size=(6, 7, 5))
        shuffled = rec[rng.permutation(6)][:, rng.permutation(7)]
        np.testing.assert_allclose(gate_histogram(rec).unit_means, gate_histogram(shuffled).unit_means)

    def test_empty(self) -> None:
        """Evaluation of the error on an empty recording."""
        with pytest.raises(ShapeError, match="empty recording"):
            gate_histogram(np.zeros((0, 3, 4)))

    def test_bimodality(self) -> None:
        """Evaluation of the share of units outside [0.2, 0.8]."""
        assert bimodality_fraction(np.array([0.05, 0.95, 0.5, 0.99])) == 0.75

    def test_untrained_ugi_is_uniform(self) -> None:
        """Evaluation of untrained UGI gates at zero input against U[1/d, 1-1/d]."""
        hidden = 256
        params = init_cell_params("lstm", GateConfig.from_variant("U-"), 2, hidden, make_rng(5))
        _, caches, _ = unroll(params, np.zeros((1, 1, 2)))
        means = gate_histogram(record_forget(caches)).unit_means
        assert uniform_init_ks(means, hidden) > 0.01


class TestTimescales:
    def test_decay_period(self) -> None:
        """Evaluation of decay periods at reference activations."""
        assert decay_period(0.5) == 2.0
        np.testing.assert_allclose(decay_period(0.9), 10.0)
        np.testing.assert_allclose(decay_period(sigmoid(1.0)), 1 + np.e)
        with pytest.raises(ValueError, match="infinite timescale"):
            decay_period(1.0)

    def test_band(self) -> None:
        """Evaluation of the refined timescale band (D/2, D^2)."""
        assert refine_timescale_band(10.0) == (5.0, 100.0)

    def test_report(self) -> None:
        """Evaluation of per-unit periods and their quantiles."""
        report = timescale_report(np.array([[0.0, 0.5, 0.9]]))
        np.testing.assert_allclose(report.periods, [1.0, 2.0, 10.0])
        assert report.quantiles[0.5] == 2.0

    def test_constant(self) -> None:
        """Evaluation of the point mass at 1 + e^b."""
        d = timescale_sampler("constant", {"bias": 1.0}, 100, make_rng(0))
        np.testing.assert_allclose(d, 1 + np.e)

    def test_chrono_range(self) -> None:
        """Evaluation of chrono periods confined to [2, T_max]."""
        d = timescale_sampler("chrono", {"t_max": 100}, 10_000, make_rng(0))
        assert d.min() >= 2.0 and d.max() <= 100.0

    def test_uniform_survival(self) -> None:
        """Evaluation of P(D > x) = 1/x for UGI at x in {2, 5, 10}."""
        d = timescale_sampler("uniform", {}, 100_000, make_rng(1))
        for x in (2.0, 5.0, 10.0):
            assert abs(np.mean(d > x) - 1.0 / x) < 0.01

    def test_uniform_ks(self) -> None:
        """Evaluation of a KS test of UGI periods against the CDF 1 - 1/x."""
        d = timescale_sampler("uniform", {}, 100_000, make_rng(2))
        assert stats.kstest(d, lambda x: 1.0 - 1.0 / np.maximum(x, 1.0)).pvalue > 0.01

    def test_cumax_tail(self) -> None:
        """Evaluation of the cumax tail P(D > x) near 1/x."""
        d = timescale_sampler("cumax", {"hidden": 1000}, 100_000, make_rng(3))
        for x in (2.0, 5.0, 10.0):
            assert abs(np.mean(d > x) - 1.0 / x) < 0.02

    def test_chrono_free(self) -> None:
        """Evaluation of the unknown-horizon sampler support and heavy tail."""
        d = timescale_sampler("chrono_free", {"k_max": 1000}, 10_000, make_rng(4))
        assert d.min() >= 2.0 and d.max() <= 1001.0
        assert np.mean(d > 100) > 0.01

    def test_unknown_kind(self) -> None:
        """Evaluation of the error for an unknown initialization."""
        with pytest.raises(ValueError, match="unknown timescale sampler"):
            timescale_sampler("gaussian", {}, 3, make_rng(0))

    def test_master_sum_is_five_sixths(self) -> None:
        """Evaluation of the mean f_hat + i_hat at master-gate initialization."""
        value = master_gate_sum_mean(1024, 2_000, make_rng(6))
        assert abs(value - 5 / 6) < 0.01


class TestBounds:
    def test_half(self) -> None:
        """Evaluation of the bounds at g = 0.5 against the r = 0.5 value."""
        bounds = grad_norm_bounds([0.5])
        assert bounds.lower[0] <= 0.2795 <= bounds.upper[0]
        assert bounds.standard[0] == 0.25

    def test_r_half_path_between_bounds(self) -> None:
        """Evaluation of min <= norm(f=g) <= max across the grid."""
        g = np.linspace(0.01, 0.99, 25)
        bounds = grad_norm_bounds(g)
        at_f = refine_grad_norm(g, g)
        assert np.all(bounds.lower <= at_f + 1e-12)
        assert np.all(at_f <= bounds.upper + 1e-12)
        assert np.all(bounds.lower >= 0.0)

    def test_refine_beats_standard_near_one(self) -> None:
        """Evaluation of the max bound exceeding g(1-g) for g >= 0.95."""
        g = np.array([0.95, 0.97, 0.99, 0.999])
        bounds = grad_norm_bounds(g)
        assert np.all(bounds.upper > bounds.standard)


class TestContour:
    def test_examples(self) -> None:
        """Evaluation of reference contour values and the r = 0.5 row."""
        f = np.linspace(0, 1, 11)
        r = np.array([0.0, 0.5, 1.0])
        G = g_contour(f, r)
        np.testing.assert_allclose(G[1], f, atol=1e-15)
        np.testing.assert_allclose(G[2, 5], 0.75)
        np.testing.assert_allclose(g_contour([0.9], [1.0])[0, 0], 0.99)

    @given(st.integers(2, 30), st.integers(2, 30))
    def test_monotone(self, nf: int, nr: int) -> None:
        """Evaluation of monotonicity along both grid axes."""
        G = g_contour(np.linspace(0, 1, nf), np.linspace(0, 1, nr))
        assert np.all(np.diff(G, axis=0) >= -1e-15)
        assert np.all(np.diff(G, axis=1) >= -1e-15)

    def test_out_of_range(self) -> None:
        """Evaluation of the error for grids outside [0, 1]."""
        with pytest.raises(ValueError):
            g_contour([1.5], [0.5])


def test_csv_outputs(tmp_path) -> None:
    """Evaluation of CSV headers and row counts."""
    axis = np.linspace(0, 1, 101)
    path = write_contour_csv(tmp_path / "contour.csv", axis, axis)
    lines = path.read_text().splitlines()
    assert lines[0] == "f,r,g"
    assert len(lines) == 1 + 10201
    hist = write_histogram_csv(tmp_path / "h.csv", gate_histogram(np.full((2, 3), 0.5)))
    lines = hist.read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count"
    assert len(lines) == 51
