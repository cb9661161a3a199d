import math

import numpy as np
import pytest
from scipy import stats

from irtthresh.data import Binary, Continuous, ItemResponseMatrix, ItemSpec, ModelSpec
from irtthresh.difficulty import Linear
from irtthresh.errors import NotConverged, NotNested
from irtthresh.estimation import FitOptions, check_nested, fit, lr_test, observed_information, standard_errors
from irtthresh.likelihood import ThresholdsModel, build_layout
from irtthresh.simulation import SimulationScenario, simulate_dataset

from conftest import central_diff, mixed_scenario


@pytest.fixture(scope="module")
def varying():
    sc = mixed_scenario(n_persons=300, seed=21)
    data = simulate_dataset(sc).data
    return sc, data, fit(data, sc.spec)


@pytest.fixture(scope="module")
def common(varying):
    sc, data, _ = varying
    return fit(data, sc.spec.replace(slope_mode="common"))


class TestFit:
    def test_converged_with_small_score(self, varying):
        sc, data, res = varying
        assert res.converged and res.grad_norm < 1e-4
        model = ThresholdsModel(res.layout, data)
        u = res.params.values
        fd = central_diff(model.loglik, u, 1e-5)
        assert np.max(np.abs(fd - model.loglik_and_score(u)[1])) < 1e-4

    def test_result_invariants(self, varying):
        _, _, res = varying
        assert res.sigma_theta > 0
        for it, d in zip(res.spec.items, res.difficulties):
            if isinstance(it.support, Binary):
                continue
            if it.support.is_discrete:
                top = it.support.top if it.support.top is not None else 30
                ys = np.arange(top, dtype=float)
            else:
                ys = np.linspace(-3, 3, 50)
            assert np.all(np.diff(d.value(ys)) > 0)
        assert set(res.se) == set(res.params_constrained)
        assert all(v > 0 for v in res.se.values())

    def test_objective_nondecreasing(self, varying):
        _, _, res = varying
        h = np.asarray(res.history)
        assert np.all(np.diff(h) >= -1e-9 * np.abs(h[1:]))

    def test_nesting_order(self, varying, common):
        assert varying[2].loglik >= common.loglik
        assert common.n_params == varying[2].n_params - 2  # three sloped items share one slope

    def test_multistart_agreement(self, varying):
        sc, data, res = varying
        rng = np.random.default_rng(9)
        lls = []
        for _ in range(5):
            start = res.params.values + rng.normal(0, 0.5, res.n_params)
            lls.append(fit(data, sc.spec, FitOptions(start=start, compute_se=False)).loglik)
        assert max(lls) - min(lls) < 1e-4
        assert abs(lls[0] - res.loglik) < 1e-4

    def test_person_permutation(self, varying):
        sc, data, res = varying
        perm = np.random.default_rng(1).permutation(data.n_persons)
        shuffled = ItemResponseMatrix(data.items, data.values[perm])
        r2 = fit(shuffled, sc.spec, FitOptions(compute_se=False))
        assert r2.loglik == pytest.approx(res.loglik, abs=1e-8)
        assert np.allclose(r2.params.values, res.params.values, atol=1e-5)

    def test_item_permutation(self, varying):
        sc, data, res = varying
        order = [3, 0, 4, 2, 1]
        items = tuple(data.items[j] for j in order)
        data2 = ItemResponseMatrix(items, data.values[:, order])
        r2 = fit(data2, sc.spec.with_items(items), FitOptions(compute_se=False))
        assert r2.loglik == pytest.approx(res.loglik, abs=1e-8)
        for name, v in res.params_constrained.items():
            assert r2.params_constrained[name] == pytest.approx(v, abs=1e-5)

    def test_binary_logistic_consistency(self):
        """Estimates fall within 3 SEs of the truth for >= 95% of parameters over 20 replications."""
        items = tuple(ItemSpec(f"b{i}", Binary(), "linear") for i in range(5))
        spec = ModelSpec(items, response_function="logistic")
        truth = (-1.0, -0.5, 0.0, 0.4, 1.2)
        hits = total = 0
        for rep in range(20):
            sc = SimulationScenario(spec, tuple(Linear(d, 1.0) for d in truth), 2000, 1.0, seed=100 + rep)
            res = fit(simulate_dataset(sc).data, spec)
            assert res.converged
            for i, d in enumerate(truth):
                est, se = res.params_constrained[f"b{i}.intercept"], res.se[f"b{i}.intercept"]
                hits += abs(est - d) < 3 * se
                total += 1
            hits += abs(res.sigma_theta - 1.0) < 3 * res.se["sigma_theta"]
            total += 1
        assert hits / total >= 0.95


class TestStandardErrors:
    def test_information_symmetric(self, varying):
        _, data, res = varying
        info = res.information
        assert np.max(np.abs(info - info.T)) <= 1e-6 * np.max(np.abs(info))

    def test_recomputed_matches(self, varying):
        sc, data, res = varying
        se = standard_errors(res, data)
        for k, v in se.items():
            assert v == pytest.approx(res.se[k], rel=1e-10)

    def test_stacking_shrinks_by_sqrt_two(self):
        sc = mixed_scenario(n_persons=200, seed=5)
        data = simulate_dataset(sc).data
        a = fit(data, sc.spec)
        b = fit(data.stack(data), sc.spec)
        ratios = np.array([b.se[k] / a.se[k] for k in a.se])
        assert np.all(np.abs(ratios - 1 / math.sqrt(2)) < 0.02 / math.sqrt(2))

    def test_binary_closed_form_oracle(self):
        """One normal-ogive item with sigma held fixed: information of delta0 from the closed-form marginal."""
        items = (ItemSpec("b", Binary(), "linear"),)
        P, k, sigma = 400, 130, 1.3
        data = ItemResponseMatrix(items, np.r_[np.ones(k), np.zeros(P - k)][:, None])
        layout = build_layout(ModelSpec(items, quadrature_nodes=40), data)
        s = math.sqrt(1 + sigma**2)
        p_hat = k / P
        d_hat = -s * stats.norm.ppf(p_hat)  # marginal MLE of delta0
        z = -d_hat / s
        info_oracle = P * stats.norm.pdf(z) ** 2 / (s**2 * p_hat * (1 - p_hat))
        model = ThresholdsModel(layout, data)
        u = np.array([d_hat, math.log(sigma)])
        assert abs(model.loglik_and_score(u)[1][0]) < 1e-6
        info = observed_information(model, u)
        assert 1 / math.sqrt(info[0, 0]) == pytest.approx(1 / math.sqrt(info_oracle), rel=1e-3)


class TestLrTest:
    def test_identical_fits(self, varying):
        r = lr_test(varying[2], varying[2])
        assert r.statistic == 0.0 and r.p_value == 1.0

    def test_common_vs_varying(self, varying, common):
        r = lr_test(varying[2], common)
        assert r.df == 2 and r.statistic >= 0
        assert r.p_value == pytest.approx(stats.chi2.sf(r.statistic, 2))
        assert r.statistic == pytest.approx(2 * (varying[2].loglik - common.loglik))

    def test_df_is_items_minus_one(self):
        items = tuple(ItemSpec(f"c{i}", Continuous(), "linear") for i in range(6))
        spec = ModelSpec(items)
        full = build_layout(spec, spline_ranges={})
        red = build_layout(spec.replace(slope_mode="common"), spline_ranges={})
        assert full.n_params - red.n_params == 5

    def test_not_nested(self, varying, common):
        with pytest.raises(NotNested):
            lr_test(common, varying[2])
        sc = varying[0]
        other = sc.spec.replace(response_function="logistic")
        with pytest.raises(NotNested):
            check_nested(sc.spec, other)

    def test_requires_convergence(self, varying, common):
        import dataclasses
        bad = dataclasses.replace(common, converged=False)
        with pytest.raises(NotConverged):
            lr_test(varying[2], bad)
