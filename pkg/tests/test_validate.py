import numpy as np
import pytest
from scipy import stats

from latmax.errors import InvalidInputError
from latmax.validate import (
    bh_adjust,
    emit_pp_svg,
    kolmogorov,
    kolmogorov_2samp,
    mean_ratio,
    pp_data,
    render_pp_svg,
    rmse_identity,
)


@pytest.fixture
def pvals(gen):
    ref = gen.uniform(0, 1, 500)
    return ref, {"exact": ref.copy(), "half": ref / 2}


class TestPPData:
    def test_ordered_by_reference(self, pvals):
        ref, methods = pvals
        data = pp_data(ref, methods)
        assert np.all(np.diff(data.reference) >= 0)
        assert np.array_equal(data.methods["exact"], data.reference)
        assert data.labels == ("exact", "half")
        assert data.uniform[-1] == 1.0 and data.size == 500

    def test_length_mismatch(self, pvals):
        ref, _ = pvals
        with pytest.raises(InvalidInputError):
            pp_data(ref, {"short": ref[:10]})

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            pp_data([0.1, 1.2], {})

    def test_mechanism_gap(self, pvals):
        ref, methods = pvals
        data = pp_data(ref, methods)
        assert data.mechanism_gap("half") < 0.05


class TestMetrics:
    def test_exact_method(self, pvals):
        ref, methods = pvals
        window = (0.0, 1.0)
        assert mean_ratio(ref, methods["exact"], window) == pytest.approx(1.0)
        assert rmse_identity(ref, methods["exact"], window) == 0.0

    def test_half_method(self, pvals):
        ref, methods = pvals
        assert mean_ratio(ref, methods["half"], (0.0, 1.0)) == pytest.approx(0.5)

    def test_window_is_half_open(self):
        ref = np.array([0.001, 0.01, 0.05, 0.2])
        meth = np.array([100.0, 0.02, 0.1, 0.0]) / 100.0
        # only 0.01 and 0.05 fall in (0.001, 0.05]
        assert mean_ratio(ref, meth) == pytest.approx((0.0002 / 0.01 + 0.001 / 0.05) / 2)

    def test_empty_window(self):
        with pytest.raises(InvalidInputError):
            mean_ratio([0.5, 0.6], [0.5, 0.6])

    def test_kolmogorov(self, gen):
        x = gen.standard_normal(5000)
        assert kolmogorov(x, stats.norm.cdf) < 0.03
        assert kolmogorov(x + 1.0, stats.norm.cdf) > 0.3
        assert kolmogorov_2samp(x, x) == 0.0


class TestBH:
    def test_step_up(self):
        p = np.array([0.01, 0.039, 0.03, 0.005, 0.2])
        res = bh_adjust(p, 0.05)
        assert list(res.rejected) == [True, True, True, True, False]
        assert res.n_rejected == 4
        assert np.allclose(res.adjusted, [0.025, 0.04875, 0.04875, 0.025, 0.2])

    def test_none_rejected(self):
        res = bh_adjust([0.5, 0.9, 0.3], 0.05)
        assert res.n_rejected == 0
        assert not res.rejected.any()

    def test_empty(self):
        res = bh_adjust([], 0.05)
        assert res.n_rejected == 0 and res.adjusted.size == 0

    def test_rejection_matches_adjusted(self, gen):
        p = np.concatenate([gen.uniform(0, 1, 200), gen.uniform(0, 1e-3, 20)])
        res = bh_adjust(p, 0.1)
        assert np.array_equal(res.rejected, res.adjusted <= 0.1)


class TestPlot:
    def test_deterministic_bytes(self, pvals):
        ref, methods = pvals
        data = pp_data(ref, methods)
        assert render_pp_svg(data, "pp") == render_pp_svg(data, "pp")

    def test_one_curve_per_method(self, pvals):
        ref, methods = pvals
        svg = render_pp_svg(pp_data(ref, methods)).decode()
        assert svg.startswith("<?xml")
        assert 'id="identity"' in svg
        assert 'id="method-exact"' in svg and 'id="method-half"' in svg

    def test_emit(self, pvals, tmp_path):
        ref, methods = pvals
        path = emit_pp_svg(pp_data(ref, methods), tmp_path / "plots" / "pp.svg")
        assert path.read_bytes().startswith(b"<?xml")
        assert not [p for p in path.parent.iterdir() if p.name.startswith(".")]
