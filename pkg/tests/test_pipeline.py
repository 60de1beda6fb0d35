import numpy as np
import pytest
from scipy import stats

from latmax import rng
from latmax.errors import InvalidInputError
from latmax.fieldsim import simulate
from latmax.lattice import Field, build_neighborhood, find_peaks, neighbor_presence
from latmax.lookup import LookupTable
from latmax.mcdlm import SamplingModel, peak_pvalues, sample_local_maxima
from latmax.pipeline import OUTSIDE_MASK, StudyData, analyze_peaks, axis_correlations, one_sample_t


@pytest.fixture
def study(sim_spec):
    return StudyData(tuple(simulate(sim_spec(eta=1.0, size=20, n_fields=12, seed=21))))


@pytest.fixture
def study_1d(sim_spec):
    return StudyData(tuple(simulate(sim_spec(eta=2.0, size=300, dim=1, n_fields=10, seed=22))))


def gaussian_table(dim):
    rho = np.linspace(0.01, 0.99, 99)
    u = np.linspace(-10.0, 10.0, 201)
    cdf = np.tile(stats.norm.cdf(u), (rho.size, 1))
    return LookupTable(dim, rho, u, cdf, seed=0, samples_per_rho=10 ** 6)


class TestTMap:
    def test_matches_scipy(self, gen):
        subjects = [Field.from_array(gen.normal(0.3, 1.0, (6, 5))) for _ in range(8)]
        tmap = one_sample_t(StudyData(tuple(subjects)))
        expected = stats.ttest_1samp(np.stack([s.array for s in subjects]), 0.0, axis=0).statistic
        assert np.allclose(tmap.field.array, expected)
        assert tmap.nu == 7

    def test_hand_example(self):
        subjects = [Field.from_array(np.array([v])) for v in (1.0, 2.0, 3.0)]
        # mean 2, sd 1, n 3
        assert one_sample_t(StudyData(tuple(subjects))).field.values[0] == pytest.approx(2 * np.sqrt(3))

    def test_zero_variance(self):
        subjects = [Field.from_array(np.array([1.0, float(i)])) for i in range(3)]
        with pytest.raises(InvalidInputError):
            one_sample_t(StudyData(tuple(subjects)))

    def test_outside_mask(self):
        subjects = [Field.from_array(np.array([1.0, float(i)])) for i in range(3)]
        tmap = one_sample_t(StudyData(tuple(subjects), mask=np.array([False, True])))
        assert tmap.field.values[0] == OUTSIDE_MASK

    def test_scale_invariant(self, study):
        scaled = StudyData(tuple(Field(s.lattice, 4.0 * s.values) for s in study.subjects))
        assert np.allclose(one_sample_t(scaled).field.values, one_sample_t(study).field.values)


class TestStudyData:
    def test_needs_two(self, gen):
        with pytest.raises(InvalidInputError):
            StudyData((Field.from_array(gen.standard_normal((3, 3))),))

    def test_lattices_must_match(self, gen):
        with pytest.raises(InvalidInputError):
            StudyData((Field.from_array(gen.standard_normal((3, 3))), Field.from_array(gen.standard_normal((3, 4)))))

    def test_mask_shape(self, study):
        with pytest.raises(InvalidInputError):
            StudyData(study.subjects, mask=np.ones((3, 3), dtype=bool))

    def test_empty_mask(self, study):
        with pytest.raises(InvalidInputError):
            StudyData(study.subjects, mask=np.zeros((20, 20), dtype=bool))


class TestAnalyze:
    def test_mcdlm_t(self, study):
        nbhd = build_neighborhood("pc", 2)
        res = analyze_peaks(study, nbhd, "mcdlm_t", target_n=3000, seed=1)
        expected = find_peaks(one_sample_t(study).field, nbhd)
        assert [p.location for p in res.peaks] == [p.location for p in expected]
        assert res.method == "mcdlm_t"
        assert res.samples.model == "t(11)"
        assert all(set(p.pvalues) == {"mcdlm_t", "bh"} for p in res.peaks)
        assert all(p.pvalues["bh"] >= p.pvalues["mcdlm_t"] for p in res.peaks)
        assert res.bh.adjusted.size == len(res.peaks)

    def test_axis_correlations(self, study):
        rhos = axis_correlations(study)
        assert len(rhos) == 2
        assert all(0.5 < r < 0.95 for r in rhos)
        assert len(analyze_peaks(study, build_neighborhood("pc", 2), target_n=500, seed=1).axis_fwhm) == 2

    def test_reproducible(self, study):
        nbhd = build_neighborhood("fc", 2)
        a = analyze_peaks(study, nbhd, "mcdlm_gaussianized", target_n=1000, seed=4, threads=1)
        b = analyze_peaks(study, nbhd, "mcdlm_gaussianized", target_n=1000, seed=4, threads=3)
        assert [p.pvalues for p in a.peaks] == [p.pvalues for p in b.peaks]

    def test_lookup_without_table_falls_back(self, study):
        res = analyze_peaks(study, build_neighborhood("fc", 2), "lookup_if_isotropic", target_n=500, seed=2)
        assert res.method == "mcdlm_gaussianized"
        assert res.notes == ["no lookup table supplied"]

    def test_lookup_needs_fc(self, study):
        res = analyze_peaks(
            study, build_neighborhood("pc", 2), "lookup_if_isotropic", table=gaussian_table(2), target_n=500, seed=2
        )
        assert res.method == "mcdlm_gaussianized"

    def test_lookup_1d(self, study_1d):
        res = analyze_peaks(study_1d, build_neighborhood("fc", 1), "lookup_if_isotropic", table=gaussian_table(1))
        assert res.method == "lookup_if_isotropic"
        assert res.samples is None
        for p in res.peaks[:10]:
            z = stats.norm.isf(stats.t.sf(p.height, res.tmap.nu))
            assert p.pvalues["lookup_if_isotropic"] == pytest.approx(stats.norm.sf(z), abs=1e-3)

    def test_external(self, study):
        nbhd = build_neighborhood("pc", 2)
        first = analyze_peaks(study, nbhd, target_n=500, seed=3).peaks[0]
        res = analyze_peaks(study, nbhd, "external", external={first.location: 0.001})
        assert res.peaks[0].pvalues == {"external": 0.001, "bh": pytest.approx(0.001)}
        assert all(not p.pvalues for p in res.peaks[1:])

    def test_unknown_method(self, study):
        with pytest.raises(InvalidInputError):
            analyze_peaks(study, build_neighborhood("pc", 2), "bonferroni")

    def test_dimension_mismatch(self, study):
        with pytest.raises(InvalidInputError):
            analyze_peaks(study, build_neighborhood("pc", 3))

    def test_t_and_gaussianized_rank_peaks_alike(self, study):
        nbhd = build_neighborhood("fc", 2)
        by_method = {}
        for method in ("mcdlm_t", "mcdlm_gaussianized"):
            res = analyze_peaks(study, nbhd, method, target_n=4000, seed=5)
            order = np.argsort([-p.height for p in res.peaks], kind="stable")
            p = np.array([res.peaks[i].pvalues[method] for i in order])
            assert np.all(np.diff(p) >= 0)
            by_method[method] = p
        rho = stats.spearmanr(by_method["mcdlm_t"], by_method["mcdlm_gaussianized"]).statistic
        assert rho > 0.98

    def test_pvalues_invariant_to_subject_scaling(self, study):
        nbhd = build_neighborhood("pc", 2)
        scaled = StudyData(tuple(Field(s.lattice, 3.0 * s.values) for s in study.subjects))
        a = analyze_peaks(study, nbhd, "mcdlm_t", target_n=2000, seed=8)
        b = analyze_peaks(scaled, nbhd, "mcdlm_t", target_n=2000, seed=8)
        assert [p.location for p in a.peaks] == [p.location for p in b.peaks]
        assert np.allclose([p.pvalues["mcdlm_t"] for p in a.peaks], [p.pvalues["mcdlm_t"] for p in b.peaks])


class TestReducedBoundary:
    def test_boundary_peaks_use_in_lattice_neighbours(self, study):
        nbhd = build_neighborhood("fc", 2)
        res = analyze_peaks(study, nbhd, "mcdlm_t", boundary_policy="reduced", target_n=2000, seed=6)
        boundary = [p for p in res.peaks if p.boundary]
        assert boundary and len(boundary) < len(res.peaks)

        keys = {p.location: tuple(bool(x) for x in neighbor_presence(p.location, nbhd, (20, 20))) for p in boundary}
        patterns = sorted(set(keys.values()))
        model = SamplingModel.student_t(res.tmap.nu)
        for p in boundary:
            key = keys[p.location]
            sub = res.cov.select(nbhd.restrict(key))
            child = sample_local_maxima(
                sub, model, target_n=2000, seed=rng.derive_seed(6, rng.BOUNDARY, 1 + patterns.index(key))
            )
            expected, _ = peak_pvalues(child, [p.height])
            assert p.pvalues["mcdlm_t"] == pytest.approx(float(expected[0]))

    def test_interior_peaks_match_exclude_policy(self, study):
        nbhd = build_neighborhood("fc", 2)
        reduced = analyze_peaks(study, nbhd, "mcdlm_t", boundary_policy="reduced", target_n=2000, seed=6)
        excluded = analyze_peaks(study, nbhd, "mcdlm_t", target_n=2000, seed=6)
        interior = {p.location: p.pvalues["mcdlm_t"] for p in reduced.peaks if not p.boundary}
        assert interior == {p.location: p.pvalues["mcdlm_t"] for p in excluded.peaks}
        assert reduced.samples.heights.tobytes() == excluded.samples.heights.tobytes()

    def test_lookup_sends_boundary_peaks_to_sampler(self, study_1d):
        bump = 5.0 * np.exp(-np.arange(300) ** 2 / 8.0)
        study = StudyData(tuple(Field(s.lattice, s.values + bump) for s in study_1d.subjects))
        res = analyze_peaks(
            study,
            build_neighborhood("fc", 1),
            "lookup_if_isotropic",
            boundary_policy="reduced",
            table=gaussian_table(1),
            target_n=2000,
            seed=7,
        )
        assert res.method == "lookup_if_isotropic"
        first = next(p for p in res.peaks if p.location == (0,))
        assert first.boundary
        assert set(first.pvalues) == {"mcdlm_gaussianized", "bh"}
        assert any(n.endswith("boundary peak(s) use mcdlm_gaussianized") for n in res.notes)
        assert all("lookup_if_isotropic" in p.pvalues for p in res.peaks if not p.boundary)
        assert res.bh.adjusted.size == len(res.peaks)
