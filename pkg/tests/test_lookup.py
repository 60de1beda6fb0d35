import numpy as np
import pytest
from scipy import stats

from latmax import rng
from latmax.covariance import kronecker_cov
from latmax.errors import InvalidInputError, SmoothingError
from latmax.lookup import LookupTable, build_table, default_rho_grid, query, smooth_table
from latmax.mcdlm import sample_local_maxima

RHO = np.linspace(0.1, 0.9, 17)
U = np.linspace(-3.0, 5.0, 60)


def sigmoid_table(noise=0.0, seed=0):
    cdf = stats.norm.cdf(U[None, :] - 2.0 * RHO[:, None])
    if noise:
        cdf = np.clip(cdf + np.random.default_rng(seed).normal(0.0, noise, cdf.shape), 0.0, 1.0)
    return LookupTable(2, RHO, U, cdf, seed=0, samples_per_rho=1000)


@pytest.fixture(scope="module")
def small_table():
    return build_table(1, samples_per_rho=2000, seed=3, n_u=200, rho_grid=[0.2, 0.4, 0.6], threads=2)


class TestBuild:
    def test_shape(self, small_table):
        assert small_table.shape == (3, 200)
        assert np.all(np.diff(small_table.u_grid) > 0)
        assert not small_table.smoothed

    def test_row_matches_direct_sampling(self, small_table):
        seed = rng.derive_seed(3, rng.LOOKUP, 1)
        direct = sample_local_maxima(kronecker_cov(0.4, 1), target_n=2000, seed=seed, threads=1)
        expected = np.searchsorted(direct.heights, small_table.u_grid, side="right") / 2000
        assert np.array_equal(small_table.cdf[1], expected)

    def test_reproducible_across_threads(self, small_table):
        again = build_table(1, samples_per_rho=2000, seed=3, n_u=200, rho_grid=[0.2, 0.4, 0.6], threads=1)
        assert np.array_equal(again.cdf, small_table.cdf)
        assert np.array_equal(again.u_grid, small_table.u_grid)

    def test_rows_are_cdfs(self, small_table):
        assert np.all(np.diff(small_table.cdf, axis=1) >= 0)

    def test_dimension_limit(self):
        with pytest.raises(InvalidInputError):
            build_table(4, samples_per_rho=10)

    def test_default_grid(self):
        grid = default_rho_grid()
        assert grid.size == 99
        assert grid[0] == 0.01 and grid[-1] == 0.99


class TestSmooth:
    def test_smooth_surface_is_kept(self):
        table = sigmoid_table()
        smoothed = smooth_table(table)
        assert smoothed.smoothed
        assert np.max(np.abs(smoothed.cdf - table.cdf)) < 1e-3

    def test_noise_is_reduced(self):
        truth = sigmoid_table().cdf
        noisy = sigmoid_table(noise=0.01, seed=4)
        smoothed = smooth_table(noisy)
        assert np.all(np.diff(smoothed.cdf, axis=1) >= 0)
        assert np.sqrt(np.mean((smoothed.cdf - truth) ** 2)) < np.sqrt(np.mean((noisy.cdf - truth) ** 2))

    def test_fixed_lambdas_recorded(self):
        smoothed = smooth_table(sigmoid_table(), lam_rho=1e-4, lam_u=1e-3)
        assert (smoothed.lam_rho, smoothed.lam_u) == (1e-4, 1e-3)
        assert np.all((smoothed.cdf >= 0) & (smoothed.cdf <= 1))

    def test_flat_table(self):
        table = LookupTable(2, RHO, U, np.full((RHO.size, U.size), 0.5), seed=0, samples_per_rho=10)
        with pytest.raises(SmoothingError):
            smooth_table(table)


class TestQuery:
    def test_at_nodes(self):
        table = sigmoid_table()
        assert query(table, RHO[3], U[10]).value == pytest.approx(1.0 - table.cdf[3, 10])
        assert query(table, RHO[-1], U[20]).value == pytest.approx(1.0 - table.cdf[-1, 20])

    def test_between_rows(self):
        table = sigmoid_table()
        rho = 0.5 * (RHO[4] + RHO[5])
        expected = 1.0 - 0.5 * (table.cdf[4, 7] + table.cdf[5, 7])
        assert query(table, rho, U[7]) == (pytest.approx(expected), False)

    def test_rho_out_of_range(self):
        with pytest.raises(InvalidInputError):
            query(sigmoid_table(), 0.95, 1.0)

    def test_censored_below(self):
        table = sigmoid_table()
        p = query(table, RHO[0], -10.0)
        assert p.censored
        assert p.value == pytest.approx(1.0 - table.cdf[0, 0])

    def test_censored_above_has_floor(self, small_table):
        p = query(small_table, 0.3, 1e6)
        assert p.censored
        assert 1.0 / 2001 <= p.value < 0.05

    def test_method_delegates(self):
        table = sigmoid_table()
        assert table.query(0.3, 1.0) == query(table, 0.3, 1.0)


class TestTableValidation:
    def test_bad_shape(self):
        with pytest.raises(InvalidInputError):
            LookupTable(1, RHO, U, np.zeros((3, 3)), seed=0, samples_per_rho=1)

    def test_unsorted_grid(self):
        with pytest.raises(InvalidInputError):
            LookupTable(1, RHO[::-1], U, np.zeros((RHO.size, U.size)), seed=0, samples_per_rho=1)

    def test_out_of_range_cdf(self):
        with pytest.raises(InvalidInputError):
            LookupTable(1, RHO, U, np.full((RHO.size, U.size), 1.5), seed=0, samples_per_rho=1)
