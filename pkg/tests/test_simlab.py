import csv
import io
import math

import numpy as np
import pytest

from dtameta import (
    GridResult,
    Scenario,
    gen_dataset,
    gen_within_variances,
    grid_to_csv,
    rep_stream,
    run_grid,
    write_grid_csv,
)
from dtameta.simlab import GRID_CSV_HEADER

VAR_LO, VAR_HI = 0.009, 0.6


def chi2_cdf_1(x):
    """Chi-square(1) CDF, erf closed form."""
    return math.erf(math.sqrt(x / 2.0))


def chi2_cdf_3(x):
    """Chi-square(3) CDF, erf closed form."""
    return math.erf(math.sqrt(x / 2.0)) - math.sqrt(2.0 / math.pi) * math.sqrt(x) * math.exp(
        -x / 2.0
    )


def truncated_variance_mean():
    """E[v] for v = X/4, X ~ chi-square(1) truncated to [4*lo, 4*hi].

    Uses the identity x f_1(x) = f_3(x), so the truncated first moment is a
    ratio of CDF differences.
    """
    a, b = 4.0 * VAR_LO, 4.0 * VAR_HI
    return 0.25 * (chi2_cdf_3(b) - chi2_cdf_3(a)) / (chi2_cdf_1(b) - chi2_cdf_1(a))


class TestScenarioValidation:
    def test_accepts_reasonable_cell(self):
        sc = Scenario(tau2=0.4, rho=0.4, n=8, reps=100, alpha=0.05, seed=1)
        assert sc.n == 8

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(tau2=-0.1, rho=0.0, n=8, reps=10),
            dict(tau2=0.1, rho=1.0, n=8, reps=10),
            dict(tau2=0.1, rho=-1.0, n=8, reps=10),
            dict(tau2=0.1, rho=0.0, n=1, reps=10),
            dict(tau2=0.1, rho=0.0, n=8, reps=0),
            dict(tau2=0.1, rho=0.0, n=8, reps=10, alpha=0.0),
        ],
    )
    def test_rejects_bad_cells(self, kwargs):
        with pytest.raises(ValueError):
            Scenario(**kwargs)

    def test_grid_result_range_check(self):
        sc = Scenario(tau2=0.1, rho=0.0, n=8, reps=10)
        with pytest.raises(ValueError):
            GridResult(sc, coverage_ncr=1.2, coverage_ccr=0.9, median_h=0.1,
                       mean_i2=0.5, mc_se=0.01)


class TestGenWithinVariances:
    def test_shape_and_range(self):
        sv = gen_within_variances(50, rep_stream(1, 0))
        assert sv.shape == (50, 2)
        assert np.all(sv >= VAR_LO)
        assert np.all(sv <= VAR_HI)

    def test_deterministic_for_equal_streams(self):
        a = gen_within_variances(20, rep_stream(9, 4))
        b = gen_within_variances(20, rep_stream(9, 4))
        np.testing.assert_array_equal(a, b)

    def test_mean_matches_truncated_moment(self):
        sv = gen_within_variances(250_000, rep_stream(99, 0))
        vals = sv.ravel()
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        expected = truncated_variance_mean()
        assert expected == pytest.approx(0.1732291633, abs=1e-9)
        assert abs(vals.mean() - expected) <= 4.0 * se

    def test_distribution_matches_truncated_chi_square(self):
        # one-sample Kolmogorov-Smirnov against the exact truncated CDF
        sv = gen_within_variances(50_000, rep_stream(123, 0))
        vals = np.sort(sv.ravel())
        a, b = 4.0 * VAR_LO, 4.0 * VAR_HI
        denom = chi2_cdf_1(b) - chi2_cdf_1(a)
        cdf = (np.vectorize(chi2_cdf_1)(4.0 * vals) - chi2_cdf_1(a)) / denom
        n_pts = vals.size
        grid = np.arange(n_pts)
        ks = max(
            float(np.max(cdf - grid / n_pts)),
            float(np.max((grid + 1) / n_pts - cdf)),
        )
        assert ks < 0.005

    def test_impossible_rejection_raises(self):
        class ZeroRng:
            def standard_normal(self, size):
                return np.zeros(size)

        with pytest.raises(RuntimeError):
            gen_within_variances(4, ZeroRng())

    def test_needs_positive_count(self):
        with pytest.raises(ValueError):
            gen_within_variances(0, rep_stream(1, 0))


class TestGenDataset:
    def test_deterministic_in_seed_and_rep(self):
        sc = Scenario(tau2=0.3, rho=0.5, n=6, reps=10, seed=7)
        y1, s1 = gen_dataset(sc, 3).arrays()
        y2, s2 = gen_dataset(sc, 3).arrays()
        np.testing.assert_array_equal(y1, y2)
        np.testing.assert_array_equal(s1, s2)

    def test_distinct_reps_differ(self):
        sc = Scenario(tau2=0.3, rho=0.5, n=6, reps=10, seed=7)
        y1, _ = gen_dataset(sc, 0).arrays()
        y2, _ = gen_dataset(sc, 1).arrays()
        assert not np.array_equal(y1, y2)

    def test_study_ids_follow_convention(self):
        sc = Scenario(tau2=0.3, rho=0.5, n=12, reps=10, seed=7)
        d = gen_dataset(sc, 3)
        assert d.studies[0].id == "r3s01"
        assert d.studies[11].id == "r3s12"

    def test_zero_heterogeneity_leaves_only_within_noise(self):
        sc = Scenario(tau2=0.0, rho=0.0, n=20_000, reps=1, seed=5)
        y, s = gen_dataset(sc, 0).arrays()
        # each column's variance is the mean within variance; columns uncorrelated
        for col in range(2):
            assert y[:, col].var(ddof=1) == pytest.approx(s[:, col].mean(), rel=0.05)
        corr = np.corrcoef(y[:, 0], y[:, 1])[0, 1]
        assert abs(corr) < 0.025

    def test_correlation_attenuated_by_within_noise(self):
        # marginal correlation of y is tau2*rho / (tau2 + E[s]); with
        # tau2 = rho = 0.8 and E[s] = 0.17323 that is 0.64 / 0.97323
        sc = Scenario(tau2=0.8, rho=0.8, n=100_000, reps=1, seed=11)
        y, _ = gen_dataset(sc, 0).arrays()
        corr = float(np.corrcoef(y[:, 0], y[:, 1])[0, 1])
        expected = 0.64 / (0.8 + truncated_variance_mean())
        assert corr == pytest.approx(expected, abs=0.01)


class TestRunGrid:
    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            run_grid([])

    def test_single_replication_coverage_is_binary(self):
        res = run_grid([Scenario(tau2=0.2, rho=0.0, n=6, reps=1, seed=2)])[0]
        assert res.coverage_ncr in (0.0, 1.0)
        assert res.coverage_ccr in (0.0, 1.0)
        assert res.mc_se == 0.0

    @pytest.mark.slow
    def test_smoke_grid_invariants(self):
        scenarios = [
            Scenario(tau2=0.4, rho=0.4, n=8, reps=200, seed=1),
            Scenario(tau2=0.4, rho=0.4, n=16, reps=200, seed=1),
        ]
        for res in run_grid(scenarios):
            assert res.coverage_ccr >= res.coverage_ncr - 2.0 * res.mc_se
            assert res.median_h >= 0.0
            assert 0.0 <= res.mean_i2 <= 1.0
            assert res.mc_se == pytest.approx(
                math.sqrt(res.coverage_ccr * (1.0 - res.coverage_ccr) / 200.0), rel=1e-12
            )

    def test_results_independent_of_grid_composition(self):
        a = Scenario(tau2=0.3, rho=0.2, n=6, reps=100, seed=3)
        b = Scenario(tau2=0.6, rho=0.2, n=6, reps=100, seed=4)
        combined = run_grid([a, b])
        assert combined[0] == run_grid([a])[0]
        assert combined[1] == run_grid([b])[0]

    def test_mean_i2_increases_with_tau2(self):
        # same seed means identical within-variance draws per replication,
        # so the heterogeneity fraction is pointwise increasing in tau2
        results = run_grid(
            [Scenario(tau2=t, rho=0.0, n=8, reps=150, seed=3) for t in (0.1, 0.4, 0.8)]
        )
        i2 = [r.mean_i2 for r in results]
        assert i2[0] < i2[1] < i2[2]


class TestGridCsv:
    @pytest.fixture
    def results(self):
        sc = Scenario(tau2=0.1, rho=0.25, n=8, reps=400, alpha=0.05, seed=6)
        return [
            GridResult(sc, coverage_ncr=0.8765432109, coverage_ccr=0.9512345678,
                       median_h=0.4321098765, mean_i2=0.5, mc_se=0.0106789012)
        ]

    def test_header_and_formatting(self, results):
        text = grid_to_csv(results)
        lines = text.strip().split("\n")
        assert lines[0] == GRID_CSV_HEADER
        assert lines[0] == "tau2,rho,n,reps,alpha,coverage_ncr,coverage_ccr,median_h,mean_i2,mc_se"
        row = lines[1].split(",")
        assert row[0] == "0.1"
        assert row[1] == "0.25"
        assert row[2] == "8"
        assert row[3] == "400"
        assert row[5] == "0.876543"
        assert row[6] == "0.951235"
        assert row[9] == "0.0106789"

    def test_round_trip_parse(self, results):
        reader = csv.DictReader(io.StringIO(grid_to_csv(results)))
        rows = list(reader)
        assert len(rows) == 1
        assert float(rows[0]["coverage_ccr"]) == pytest.approx(0.9512345678, rel=1e-5)
        assert int(rows[0]["n"]) == 8

    def test_write_is_atomic_and_clean(self, results, tmp_path):
        target = tmp_path / "grid.csv"
        write_grid_csv(results, str(target))
        assert target.read_text() == grid_to_csv(results)
        leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
        assert leftovers == []

    def test_write_overwrites_existing(self, results, tmp_path):
        target = tmp_path / "grid.csv"
        target.write_text("stale")
        write_grid_csv(results, str(target))
        assert target.read_text().startswith(GRID_CSV_HEADER)
