import numpy as np
import pytest

from latmax import rng
from latmax.covariance import discrete_adjacent_rho, kernel_cov, kernel_weights, kernel_window, mixture_cov
from latmax.errors import InvalidInputError
from latmax.fieldsim import (
    axis_kernels,
    reference_distribution,
    simulate,
    simulate_gaussian,
    simulate_nonseparable,
    smooth_and_standardize,
    t_field,
)
from latmax.lattice import Field, build_neighborhood
from latmax.schemas import KernelSpec, LatticeSpec, SimSpec


def operator_matrix(shape, weights, pad):
    """Dense matrix of the smoothing map from padded noise to the cropped field"""
    n = int(np.prod(shape))
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        cols.append(smooth_and_standardize(e.reshape(shape), weights, pad).reshape(-1))
    return np.column_stack(cols)


def adjacent_corr(fields, axis):
    stack = np.stack([f.array for f in fields])
    a = np.moveaxis(stack, axis + 1, -1)
    return float(np.mean(a[..., 1:] * a[..., :-1]))


class TestSmoothing:
    def test_rows_have_unit_norm_1d(self):
        m = operator_matrix((14,), [kernel_weights(0.9)], (3,))
        assert np.allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-13)

    def test_rows_have_unit_norm_2d(self):
        m = operator_matrix((8, 7), [kernel_weights(0.7), kernel_weights(1.2)], (2, 2))
        assert m.shape == (4 * 3, 56)
        assert np.allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-13)

    def test_padding_beyond_window_changes_nothing(self, gen):
        eta = 1.3
        w = kernel_window(eta)
        weights = [kernel_weights(eta)] * 2
        noise = gen.standard_normal((20 + 4 * w, 20 + 4 * w))
        wide = smooth_and_standardize(noise, weights, (2 * w, 2 * w))
        tight = smooth_and_standardize(noise[w:-w, w:-w], weights, (w, w))
        assert np.allclose(wide, tight, atol=1e-12)

    def test_axis_kernels(self):
        ks = axis_kernels(KernelSpec.elliptical((1.0, 2.0)), LatticeSpec.cube(2, 5))
        assert [k.size for k in ks] == [2 * kernel_window(1.0) + 1, 2 * kernel_window(2.0) + 1]


class TestSimulate:
    def test_adjacent_correlation_matches_kernel(self, sim_spec):
        fields = list(simulate(sim_spec(eta=1.0, size=30, n_fields=400)))
        expected = discrete_adjacent_rho(1.0)
        for axis in (0, 1):
            assert adjacent_corr(fields, axis) == pytest.approx(expected, abs=0.02)

    def test_unit_variance(self, sim_spec):
        fields = list(simulate(sim_spec(eta=1.5, size=25, n_fields=400)))
        assert np.var(np.stack([f.array for f in fields])) == pytest.approx(1.0, abs=0.05)

    def test_independent_of_threads(self, sim_spec):
        spec = sim_spec(n_fields=7)
        one = [f.array for f in simulate(spec, threads=1)]
        many = [f.array for f in simulate(spec, threads=3)]
        assert all(np.array_equal(a, b) for a, b in zip(one, many))
        assert len(many) == 7

    def test_seed_matters(self, sim_spec):
        a = next(simulate(sim_spec(seed=1)))
        b = next(simulate(sim_spec(seed=2)))
        assert not np.array_equal(a.array, b.array)

    def test_field_shape(self, sim_spec):
        f = next(simulate(sim_spec(size=9, dim=3, n_fields=1)))
        assert f.array.shape == (9, 9, 9)

    def test_model_mismatch(self, sim_spec):
        with pytest.raises(InvalidInputError):
            simulate_gaussian(sim_spec(model="t", nu=4))


class TestStudentT:
    def test_variance(self, sim_spec):
        fields = list(simulate(sim_spec(eta=1.0, size=20, n_fields=400, model="t", nu=10)))
        assert np.var(np.stack([f.array for f in fields])) == pytest.approx(10 / 8, abs=0.08)

    def test_approaches_gaussian_as_nu_grows(self, sim_spec):
        gauss = np.stack([f.array for f in simulate(sim_spec(eta=1.0, size=16, n_fields=3, seed=8))])
        gaps = []
        for nu in (4, 100, 1600):
            t = np.stack([f.array for f in simulate(sim_spec(eta=1.0, size=16, n_fields=3, seed=8, model="t", nu=nu))])
            gaps.append(float(np.mean(np.abs(t - gauss))))
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 0.05

    def test_peak_heights_approach_gaussian(self, sim_spec):
        nbhd = build_neighborhood("fc", 2)
        q = np.linspace(0.1, 0.9, 9)
        gauss = reference_distribution(simulate(sim_spec(eta=1.0, size=24, n_fields=10, seed=9)), nbhd)
        gaps = []
        for nu in (3, 400):
            t = reference_distribution(simulate(sim_spec(eta=1.0, size=24, n_fields=10, seed=9, model="t", nu=nu)), nbhd)
            gaps.append(float(np.max(np.abs(np.quantile(t.heights, q) - np.quantile(gauss.heights, q)))))
        assert gaps[1] < gaps[0]
        assert gaps[1] < 0.25

    def test_built_from_nu_plus_one_fields(self, sim_spec):
        spec = sim_spec(eta=0.8, size=12, model="t", nu=3, padding=4)
        weights = axis_kernels(spec.kernel, spec.lattice)
        gen = rng.stream(spec.seed, rng.SIMULATE, 2)
        draws = [smooth_and_standardize(gen.standard_normal((20, 20)), weights, (4, 4)) for _ in range(4)]
        expected = draws[0] / np.sqrt(sum(d ** 2 for d in draws[1:]) / 3)
        assert np.allclose(t_field(spec, 2).array, expected)


class TestMixture:
    def test_axes_have_equal_correlation(self):
        lattice = LatticeSpec.cube(2, 3)
        nbhd = build_neighborhood("pc", 2)
        k = KernelSpec.elliptical((0.6, 1.8))
        mix = mixture_cov(kernel_cov(k, lattice, nbhd), kernel_cov(k.swapped(), lattice, nbhd))
        r0, r1 = mix.adjacent_correlations()
        assert r0 == pytest.approx(r1)

    def test_simulated_matches_mixture_cov(self):
        k = KernelSpec.elliptical((0.6, 1.8))
        spec = SimSpec(lattice=LatticeSpec.cube(2, 30), kernel=k, model="mixture", n_fields=400, seed=5)
        assert spec.kernel_b == k.swapped()
        fields = list(simulate(spec))
        expected = 0.5 * (discrete_adjacent_rho(0.6) + discrete_adjacent_rho(1.8))
        for axis in (0, 1):
            assert adjacent_corr(fields, axis) == pytest.approx(expected, abs=0.02)

    def test_two_dimensional_only(self):
        spec = SimSpec(
            lattice=LatticeSpec.cube(3, 6), kernel=KernelSpec.elliptical((1.0, 1.0, 2.0)), model="mixture"
        )
        with pytest.raises(InvalidInputError):
            simulate_nonseparable(spec)


class TestReference:
    def test_pooled_pvalues(self):
        field = Field.from_array(np.array([0.0, 3.0, 0.0, 1.0, 0.0, 2.0, 0.0]))
        ref = reference_distribution([field], build_neighborhood("pc", 1))
        assert list(ref.heights) == [1.0, 2.0, 3.0]
        assert np.allclose(ref.pvalues, [2 / 3, 1 / 3, 0.0])
        assert [tuple(x) for x in ref.locations] == [(3,), (5,), (1,)]

    def test_ties_share_pvalue(self):
        a = Field.from_array(np.array([0.0, 2.0, 0.0]))
        b = Field.from_array(np.array([0.0, 2.0, 0.0, 1.0, 0.0]))
        ref = reference_distribution([a, b], build_neighborhood("pc", 1))
        assert list(ref.pvalues) == [2 / 3, 0.0, 0.0]
        assert list(ref.field_index) == [1, 0, 1]
        assert ref.n_fields == 2

    def test_survival_and_sample_set(self):
        field = Field.from_array(np.array([0.0, 3.0, 0.0, 1.0, 0.0, 2.0, 0.0]))
        ref = reference_distribution([field], build_neighborhood("pc", 1))
        assert ref.survival(1.5) == pytest.approx(2 / 3)
        s = ref.as_sample_set()
        assert s.kind == "reference"
        assert s.n_accepted == s.n_attempted == 3

    def test_no_peaks(self):
        with pytest.raises(InvalidInputError):
            reference_distribution([Field.from_array(np.arange(5.0))], build_neighborhood("pc", 1))

    def test_no_fields(self):
        with pytest.raises(InvalidInputError):
            reference_distribution([], build_neighborhood("pc", 1))
