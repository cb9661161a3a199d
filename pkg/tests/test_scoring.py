import math

import numpy as np
import pytest
from scipy import stats

from irtthresh.data import Binary, Continuous, ItemResponseMatrix, ItemSpec, ModelSpec
from irtthresh.difficulty import Linear
from irtthresh.errors import NoObservedItems
from irtthresh.estimation import FitResult
from irtthresh.likelihood import ParameterVector, build_layout
from irtthresh.scoring import posterior_density, posterior_mean, posterior_mode, score_persons
from irtthresh.simulation import simulate_dataset

from conftest import mixed_scenario


def make_fit(spec, difficulties, sigma=1.0):
    """A FitResult holding given parameter values, without estimation."""
    layout = build_layout(spec, spline_ranges={})
    u = layout.pack(difficulties, sigma)
    return FitResult(spec=spec, layout=layout, params=ParameterVector(layout, u), loglik=math.nan,
                     penalty_value=0.0, converged=True, iterations=0, grad_norm=0.0,
                     underflow_count=0, n_persons=0)


@pytest.fixture
def conjugate():
    spec = ModelSpec((ItemSpec("c", Continuous(), "linear"),))
    return make_fit(spec, [Linear(0.0, 1.0)])


@pytest.fixture
def mixed_fit():
    sc = mixed_scenario(n_persons=30, seed=8)
    data = simulate_dataset(sc).data
    return make_fit(sc.spec, list(sc.difficulties), sc.sigma_theta), data


class TestPosterior:
    def test_conjugate_density(self, conjugate):
        th = np.linspace(-3, 3, 61)
        dens = posterior_density(conjugate, [1.0], th)
        assert np.allclose(dens, stats.norm.pdf(th, 0.5, math.sqrt(0.5)), atol=1e-10)

    def test_conjugate_mean_and_mode(self, conjugate):
        s = posterior_mean(conjugate, {"c": 1.0})
        assert abs(s.posterior_mean - 0.5) < 1e-6
        assert abs(s.posterior_mode - 0.5) < 1e-6
        assert abs(s.posterior_sd - math.sqrt(0.5)) < 1e-6
        assert s.n_items_observed == 1

    def test_empty_is_prior(self, conjugate):
        th = np.linspace(-3, 3, 13)
        assert np.allclose(posterior_density(conjugate, [np.nan], th, allow_empty=True), stats.norm.pdf(th))
        with pytest.raises(NoObservedItems):
            posterior_density(conjugate, [np.nan], 0.0)
        with pytest.raises(NoObservedItems):
            posterior_mean(conjugate, {})
        with pytest.raises(NoObservedItems):
            posterior_mode(conjugate, [np.nan])

    def test_density_integrates_to_one(self, mixed_fit):
        fit, data = mixed_fit
        grid = np.linspace(-8, 8, 10001)
        for p in range(5):
            dens = posterior_density(fit, data.values[p], grid)
            assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-6

    def test_mean_matches_trapezoid_oracle(self, mixed_fit):
        fit, data = mixed_fit
        grid = np.linspace(-8, 8, 10001)
        for p in range(10):
            dens = posterior_density(fit, data.values[p], grid)
            oracle = np.trapezoid(grid * dens, grid) / np.trapezoid(dens, grid)
            assert abs(posterior_mean(fit, data.values[p]).posterior_mean - oracle) < 1e-5

    def test_mode_maximises_density(self, mixed_fit):
        fit, data = mixed_fit
        grid = np.linspace(-8, 8, 16001)
        for p in range(5):
            m = posterior_mode(fit, data.values[p])
            assert abs(m - grid[np.argmax(posterior_density(fit, data.values[p], grid))]) < 2e-3
            assert posterior_density(fit, data.values[p], m) >= posterior_density(fit, data.values[p], m + 1e-4)


class TestProperties:
    def test_binary_monotone(self):
        spec = ModelSpec((ItemSpec("b", Binary(), "linear"),))
        fit = make_fit(spec, [Linear(0.3, 1.0)])
        lo, hi = posterior_mean(fit, [0.0]), posterior_mean(fit, [1.0])
        assert hi.posterior_mean > lo.posterior_mean
        assert hi.posterior_mode > lo.posterior_mode

    def test_symmetric_design_negates(self):
        items = tuple(ItemSpec(f"c{i}", Continuous(), "linear") for i in range(3)) + (
            ItemSpec("b1", Binary(), "linear"), ItemSpec("b2", Binary(), "linear"))
        spec = ModelSpec(items)
        fit = make_fit(spec, [Linear(-1, 1.5), Linear(0, 1), Linear(1, 1.5), Linear(-0.7, 1), Linear(0.7, 1)])
        # y -> -y on continuous items maps delta_i to delta_{-i}; binaries flip and swap
        y = np.array([0.3, -0.8, 1.4, 1.0, 0.0])
        mirror = np.array([-1.4, 0.8, -0.3, 1.0, 0.0])
        a, b = posterior_mean(fit, y), posterior_mean(fit, mirror)
        assert b.posterior_mean == pytest.approx(-a.posterior_mean, abs=1e-10)
        assert b.posterior_mode == pytest.approx(-a.posterior_mode, abs=1e-7)
        assert b.posterior_sd == pytest.approx(a.posterior_sd, abs=1e-10)

    def test_adding_item_above_median_raises_mode(self):
        spec1 = ModelSpec((ItemSpec("c", Continuous(), "linear"),))
        spec2 = ModelSpec((ItemSpec("c", Continuous(), "linear"), ItemSpec("d", Continuous(), "linear")))
        d1, d2 = Linear(0.2, 1.3), Linear(-0.4, 0.9)
        m1 = posterior_mode(make_fit(spec1, [d1]), [0.6])
        # the conditional median of item d at theta = m1 solves delta(y) = theta
        median = d2.invert(m1)
        fit2 = make_fit(spec2, [d1, d2])
        assert posterior_mode(fit2, [0.6, median + 0.5]) >= m1

    def test_sd_positive(self, mixed_fit):
        fit, data = mixed_fit
        for s in score_persons(fit, data):
            assert s.posterior_sd > 0 and np.isfinite(s.posterior_mean)


class TestBatch:
    def test_rows_and_empty(self, mixed_fit):
        fit, data = mixed_fit
        vals = data.values.copy()
        vals[2, :] = np.nan
        holey = ItemResponseMatrix(data.items, vals, allow_empty=True)
        out = score_persons(fit, holey)
        assert len(out) == data.n_persons and out[2] is None
        assert out[3].person_index == 3
        assert out[3].posterior_mean == posterior_mean(fit, data.values[3]).posterior_mean

    def test_missing_items_counted(self, mixed_fit):
        fit, data = mixed_fit
        row = data.values[0].copy()
        row[1] = np.nan
        assert posterior_mean(fit, row).n_items_observed == 4
