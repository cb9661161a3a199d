import math

import numpy as np
import pytest
from scipy import integrate, stats

from irtthresh import response
from irtthresh.data import Binary, Continuous, Count, ItemResponseMatrix, ItemSpec, ModelSpec, OrderedCategorical
from irtthresh.difficulty import BSpline, FreeOrdinal, InverseCdf, Linear, Log, LogP1, build_bspline_basis
from irtthresh.errors import NumericalUnderflow, WrongMode, ZeroDerivative
from irtthresh.likelihood import (
    ParameterVector,
    ThresholdsModel,
    build_layout,
    exceedance,
    gauss_hermite_rule,
    log_density_continuous,
    log_density_discrete,
    marginal_log_likelihood,
    score,
    shape_penalty,
    start_values,
)

from conftest import central_diff, mixed_scenario
from irtthresh.simulation import SimulationScenario, simulate_dataset

KINDS = ["normal", "logistic"]


def binary_model(delta0, sigma, n_persons=1, y=1.0, nodes=30):
    items = (ItemSpec("b", Binary(), "linear"),)
    spec = ModelSpec(items, quadrature_nodes=nodes)
    data = ItemResponseMatrix(items, np.full((n_persons, 1), y))
    layout = build_layout(spec, data)
    return spec, data, ParameterVector(layout, np.array([delta0, math.log(sigma)]))


class TestContinuousDensity:
    def test_standard_normal_at_zero(self):
        assert log_density_continuous(Linear(0, 1), 0.0, 0.0) == pytest.approx(-0.918938533204673, abs=1e-12)

    def test_integrates_to_one(self):
        f = lambda y: math.exp(log_density_continuous(Linear(2, 3), 0.5, y))
        val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=1e-12)
        assert val == pytest.approx(1.0, abs=1e-9)

    def test_linear_moments(self):
        f = lambda y: math.exp(log_density_continuous(Linear(2, 3), 0.5, y))
        m1 = integrate.quad(lambda y: y * f(y), -np.inf, np.inf, epsabs=1e-12)[0]
        m2 = integrate.quad(lambda y: y * y * f(y), -np.inf, np.inf, epsabs=1e-12)[0]
        assert m1 == pytest.approx(-0.5, abs=1e-9)
        assert m2 - m1**2 == pytest.approx(1 / 9, abs=1e-9)

    def test_zero_derivative(self):
        flat = BSpline(build_bspline_basis((0, 1)), (1.0,) * 8)
        with pytest.raises(ZeroDerivative):
            log_density_continuous(flat, 0.0, 0.5)


class TestDiscreteMass:
    def test_binary_symmetric(self):
        for y in (0, 1):
            assert math.exp(log_density_discrete(Linear(0.3, 1), 0.3, y, support=Binary())) == pytest.approx(0.5)

    def test_count_examples(self):
        assert math.exp(log_density_discrete(LogP1(0, 1), 0.0, 0, support=Count())) == pytest.approx(0.5, abs=1e-15)
        f1 = math.exp(log_density_discrete(LogP1(0, 1), 0.0, 1, support=Count()))
        assert f1 == pytest.approx(0.5 - stats.norm.cdf(-math.log(2)), abs=1e-14)
        assert f1 == pytest.approx(0.2559, abs=1e-4)

    def test_underflow_signalled(self):
        with pytest.raises(NumericalUnderflow):
            log_density_discrete(Linear(0, 1), -60.0, 1, support=Binary())
        assert log_density_discrete(Linear(0, 1), -60.0, 1, support=Binary(), strict=False) == pytest.approx(math.log(1e-300))

    @pytest.mark.parametrize("kind", KINDS)
    def test_finite_support_sums_to_one(self, kind):
        rng = np.random.default_rng(0)
        for _ in range(50):
            th = np.sort(rng.normal(0, 1.5, 6))
            d = FreeOrdinal(tuple(th))
            theta = rng.normal(0, 2)
            p = np.exp(log_density_discrete(d, theta, np.arange(7.0), kind, OrderedCategorical(7)))
            assert abs(p.sum() - 1.0) < 1e-14

    @pytest.mark.parametrize("kind", KINDS)
    def test_count_tail_identity(self, kind):
        d = LogP1(-0.4, 1.3)
        for theta in (-2.0, 0.0, 1.7):
            ys = np.arange(0.0, 60.0)
            p = np.exp(log_density_discrete(d, theta, ys, kind, Count()))
            tail = 1.0 - np.cumsum(p)
            ref = response.cdf(kind, theta - d.value(ys))
            assert np.max(np.abs(tail - ref)) < 1e-14

    @pytest.mark.parametrize("kind", KINDS)
    def test_exceedance_nonincreasing_in_y_and_increasing_in_theta(self, kind):
        d = LogP1(0.2, 0.9)
        ys = np.arange(30.0)
        low = exceedance(d, -0.5, ys, kind, Count())
        high = exceedance(d, 0.5, ys, kind, Count())
        assert np.all(np.diff(low) <= 0) and np.all(high > low)
        assert exceedance(Linear(0, 1), 3.0, 1, kind, Binary()) == 0.0


class TestEquivalences:
    def test_rasch(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            theta, d0 = rng.normal(0, 3, 2)
            p1 = math.exp(log_density_discrete(Linear(d0, 1), theta, 1, "logistic", Binary()))
            rasch = math.exp(theta - d0) / (1 + math.exp(theta - d0))
            assert abs(p1 - rasch) < 1e-12

    @pytest.mark.parametrize("kind", KINDS)
    def test_graded_response(self, kind):
        rng = np.random.default_rng(2)
        F = stats.norm.cdf if kind == "normal" else stats.logistic.cdf
        for _ in range(100):
            k = int(rng.integers(2, 8))
            th = np.sort(rng.normal(0, 1.5, k - 1))
            theta = rng.normal(0, 2)
            # graded response: P(Y >= r) = F(theta - b_r), b_r = threshold between r-1 and r
            cum = np.concatenate([[1.0], F(theta - th), [0.0]])
            grm = cum[:-1] - cum[1:]
            got = np.exp(log_density_discrete(FreeOrdinal(tuple(th)), theta, np.arange(k, dtype=float),
                                              kind, OrderedCategorical(k)))
            assert np.max(np.abs(got - grm)) < 1e-12

    @pytest.mark.parametrize("kind", KINDS)
    def test_categorisation(self, kind):
        """A continuous item cut at tau_1 < ... < tau_{k-1} is the graded model with delta(tau_r)."""
        rng = np.random.default_rng(3)
        k_ = response.kernel(kind)
        for _ in range(100):
            d = Linear(rng.normal(), rng.exponential() + 0.1)
            k = int(rng.integers(2, 7))
            tau = np.sort(rng.normal(0, 2, k - 1))
            theta = rng.normal(0, 2)
            # continuous model: P(Y <= tau) = 1 - F(theta - delta(tau))
            edges = np.concatenate([[0.0], 1 - k_.cdf(theta - d.value(tau)), [1.0]])
            cont = np.diff(edges)
            disc = np.exp(log_density_discrete(FreeOrdinal(tuple(d.value(tau))), theta,
                                               np.arange(k, dtype=float), kind, OrderedCategorical(k)))
            assert np.max(np.abs(cont - disc)) < 1e-12


class TestContinuousNormalisation:
    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("delta,lo,hi", [
        (Linear(0.3, 1.7), -np.inf, np.inf),
        (Log(-0.2, 0.8), 0, np.inf),
        (LogP1(0.1, 1.4), -1, np.inf),
        (InverseCdf(0.2, 2.0), 0, 1),
        (BSpline(build_bspline_basis((-1, 2)), (-2.0, -1.5, -1.0, 0.0, 0.1, 0.8, 1.5, 2.5)), -np.inf, np.inf),
    ])
    def test_integrates_to_one(self, delta, lo, hi, kind):
        f = lambda y: math.exp(log_density_continuous(delta, 0.4, y, kind))
        if isinstance(delta, InverseCdf):
            # substitute y = Phi(s) to remove the endpoint singularities
            g = lambda s: f(stats.norm.cdf(s)) * stats.norm.pdf(s) if 0 < stats.norm.cdf(s) < 1 else 0.0
            val = integrate.quad(g, -12, 12, epsabs=1e-13, limit=400)[0]
        elif isinstance(delta, BSpline):
            pieces = [(-np.inf, -1), (-1, 2), (2, np.inf)]
            val = sum(integrate.quad(f, a, b, epsabs=1e-13, limit=200)[0] for a, b in pieces)
        else:
            val = integrate.quad(f, lo, hi, epsabs=1e-13, limit=200)[0]
        assert abs(val - 1.0) < 1e-6


class TestQuadrature:
    def test_one_node(self):
        r = gauss_hermite_rule(1)
        assert r.nodes.tolist() == [0.0] and r.weights.tolist() == [1.0]

    @pytest.mark.parametrize("n", [1, 2, 5, 30, 61])
    def test_weights_sum_to_one(self, n):
        assert abs(gauss_hermite_rule(n).weights.sum() - 1.0) < 1e-12

    def test_second_moment_exact(self):
        r = gauss_hermite_rule(30)
        for s in (0.5, 1.0, 2.3):
            assert abs(r.expect(lambda t: t**2, s) - s**2) < 1e-12 * max(1, s**2)

    @pytest.mark.parametrize("d0", np.linspace(-2, 2, 5))
    @pytest.mark.parametrize("sigma", [0.3, 0.7, 1.0, 1.5, 2.0])
    def test_binary_marginal_closed_form(self, d0, sigma):
        spec, data, params = binary_model(d0, sigma)
        p = math.exp(marginal_log_likelihood(params, data, spec))
        assert abs(p - stats.norm.cdf(-d0 / math.sqrt(1 + sigma**2))) < 1e-6

    def test_degenerate_prior(self):
        items = (ItemSpec("c", Continuous(), "linear"),)
        spec = ModelSpec(items)
        data = ItemResponseMatrix(items, np.array([[0.7]]))
        layout = build_layout(spec, data)
        params = ParameterVector(layout, np.array([0.2, math.log(1.3), math.log(1e-6)]))
        ll = marginal_log_likelihood(params, data, spec)
        assert abs(ll - log_density_continuous(Linear(0.2, 1.3), 0.0, 0.7)) < 1e-6

    def test_duplicating_persons_doubles(self, mixed):
        sc, data = mixed
        layout = build_layout(sc.spec, data)
        u = sc.true_vector(data)
        double = data.stack(data)
        l1 = ThresholdsModel(layout, data).loglik(u)
        l2 = ThresholdsModel(layout, double).loglik(u)
        assert l2 == pytest.approx(2 * l1, rel=1e-14)

    @pytest.mark.parametrize("keep", [[0, 1, 2], [0, 4], [3, 4]])
    def test_node_count_stability(self, keep):
        sc = mixed_scenario()
        sub = SimulationScenario(sc.spec.with_items([sc.spec.items[i] for i in keep]),
                                 tuple(sc.difficulties[i] for i in keep), sc.n_persons, seed=sc.seed)
        data = simulate_dataset(sub).data
        layout = build_layout(sub.spec, data)
        u = sub.true_vector(data)
        p30 = ThresholdsModel(layout, data, quadrature_nodes=30).per_person_loglik(u)
        p60 = ThresholdsModel(layout, data, quadrature_nodes=60).per_person_loglik(u)
        assert np.max(np.abs(p60 - p30)) < 1e-6

    def test_node_count_convergence_sharp_posterior(self, mixed):
        # five items incl. two continuous ones: posterior sd ~ 0.4, 30 nodes are not enough for 1e-6
        sc, data = mixed
        layout = build_layout(sc.spec, data)
        u = sc.true_vector(data)
        errs = []
        ref = ThresholdsModel(layout, data, quadrature_nodes=120).per_person_loglik(u)
        for n in (20, 30, 40, 60):
            errs.append(np.max(np.abs(ThresholdsModel(layout, data, quadrature_nodes=n).per_person_loglik(u) - ref)))
        assert all(b < a for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-6


class TestScore:
    @pytest.mark.parametrize("mode", ["varying", "common"])
    @pytest.mark.parametrize("kind", KINDS)
    def test_matches_finite_differences(self, mode, kind):
        sc = mixed_scenario(slope_mode=mode, kind=kind, seed=11)
        data = simulate_dataset(sc).data
        layout = build_layout(sc.spec, data)
        model = ThresholdsModel(layout, data)
        u = start_values(layout, data) + np.random.default_rng(5).normal(0, 0.2, layout.n_params)
        g = model.loglik_and_score(u)[1]
        fd = central_diff(model.loglik, u, 1e-6)
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1.0)
        assert rel.max() < 1e-5

    def test_spline_modes_match_finite_differences(self):
        rng = np.random.default_rng(4)
        items = tuple(ItemSpec(f"s{i}", Continuous(), "bspline") for i in range(3)) + (
            ItemSpec("o", OrderedCategorical(4), "bspline"),)
        y = np.column_stack([rng.normal(size=40), rng.normal(size=40) * 2, rng.gamma(2, size=40),
                             rng.integers(0, 4, 40)])
        data = ItemResponseMatrix(items, y)
        for mode, lam in (("spline_free", 3.0), ("spline_common_shape", 0.0)):
            spec = ModelSpec(items, slope_mode=mode, penalty_lambda=lam, n_basis=6)
            layout = build_layout(spec, data)
            model = ThresholdsModel(layout, data)
            u = start_values(layout, data) + rng.normal(0, 0.1, layout.n_params)
            g = model.objective(u)[1]
            fd = central_diff(lambda v: model.objective(v)[0], u, 1e-6)
            rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1.0)
            assert rel.max() < 1e-5, mode

    def test_module_level_score(self, mixed):
        sc, data = mixed
        layout = build_layout(sc.spec, data)
        params = ParameterVector(layout, sc.true_vector(data))
        assert np.array_equal(score(params, data, sc.spec), ThresholdsModel(layout, data).loglik_and_score(params.values)[1])

    def test_mirrored_binary_design(self):
        items = (ItemSpec("a", Binary(), "linear"), ItemSpec("b", Binary(), "linear"))
        y1 = np.array([1, 0, 1, 1, 0, 1, 0, 1.0])
        data = ItemResponseMatrix(items, np.column_stack([y1, 1 - y1]))
        spec = ModelSpec(items)
        layout = build_layout(spec, data)
        g = score(ParameterVector(layout, np.array([0.4, -0.4, 0.1])), data, spec)
        assert g[0] == pytest.approx(-g[1], rel=1e-12)

    def test_threads_bit_identical(self, mixed):
        sc, data = mixed
        layout = build_layout(sc.spec, data)
        u = sc.true_vector(data) + 0.05
        ref = ThresholdsModel(layout, data, n_threads=1).loglik_and_score(u)
        for t in (2, 8):
            got = ThresholdsModel(layout, data, n_threads=t).loglik_and_score(u)
            assert got[0] == ref[0] and np.array_equal(got[1], ref[1])


class TestPenalty:
    def spline_layout(self, lam, n_items=2, n_basis=3):
        items = tuple(ItemSpec(f"s{i}", Continuous(), "bspline") for i in range(n_items))
        spec = ModelSpec(items, slope_mode="spline_free", penalty_lambda=lam, n_basis=n_basis, degree=2)
        return spec, build_layout(spec, spline_ranges={it.id: (0.0, 1.0) for it in items})

    def test_identical_vectors_zero(self):
        spec, layout = self.spline_layout(5.0, 3, 5)
        basis = layout.blocks[0].template.basis
        c = (0.0, 0.5, 0.7, 2.0, 2.1)
        u = layout.pack([BSpline(basis, c)] * 3, 1.0)
        val, grad = shape_penalty(ParameterVector(layout, u))
        assert val == 0.0 and np.all(grad == 0)

    def test_shifted_vectors_zero(self):
        spec, layout = self.spline_layout(5.0, 2, 5)
        basis = layout.blocks[0].template.basis
        c = np.array([0.0, 0.5, 0.7, 2.0, 2.1])
        u = layout.pack([BSpline(basis, tuple(c)), BSpline(basis, tuple(c + 3))], 1.0)
        assert shape_penalty(ParameterVector(layout, u))[0] == pytest.approx(0.0, abs=1e-24)

    def test_single_squared_term(self):
        spec, layout = self.spline_layout(2.5)
        basis = layout.blocks[0].template.basis
        u = layout.pack([BSpline(basis, (0.0, 1.0, 2.0)), BSpline(basis, (0.0, 1.0, 3.0))], 1.0)
        assert shape_penalty(ParameterVector(layout, u))[0] == pytest.approx(2.5 * 1.0, rel=1e-12)

    def test_gradient(self):
        spec, layout = self.spline_layout(1.7, 3, 5)
        u = np.random.default_rng(0).normal(size=layout.n_params)
        val, grad = shape_penalty(ParameterVector(layout, u))
        fd = central_diff(lambda v: shape_penalty(ParameterVector(layout, v))[0], u)
        assert np.allclose(grad, fd, rtol=1e-6, atol=1e-7)

    def test_wrong_mode(self, mixed):
        sc, data = mixed
        layout = build_layout(sc.spec, data)
        with pytest.raises(WrongMode):
            shape_penalty(ParameterVector(layout, sc.true_vector(data)))


class TestLayout:
    def test_common_slope_single_entry(self):
        sc = mixed_scenario(slope_mode="common")
        data = simulate_dataset(sc).data
        layout = build_layout(sc.spec, data)
        assert layout.names.count("log_slope") == 1
        assert layout.names[-1] == "log_sigma"

    def test_pack_round_trip(self, mixed):
        sc, data = mixed
        layout = build_layout(sc.spec, data)
        u = sc.true_vector(data)
        back = layout.difficulties(u)
        for a, b in zip(back, sc.difficulties):
            assert np.allclose(a.coefficients, b.coefficients, atol=1e-14)
        assert layout.sigma(u) == pytest.approx(1.0)

    def test_missing_cells_skipped(self, mixed):
        sc, data = mixed
        vals = data.values.copy()
        vals[0, 1] = np.nan
        holey = ItemResponseMatrix(data.items, vals)
        layout = build_layout(sc.spec, data)
        u = sc.true_vector(data)
        m = ThresholdsModel(layout, holey)
        pp = m.per_person_loglik(u)
        # person 0 without item 1 equals a direct computation over the remaining items
        rule = m.rule
        thetas = rule.thetas(1.0)
        logf = np.zeros(thetas.size)
        for j, (it, d) in enumerate(zip(sc.spec.items, sc.difficulties)):
            if j == 1:
                continue
            y = data.values[0, j]
            if it.treat_as.value == "continuous":
                logf += log_density_continuous(d, thetas, y)
            else:
                logf += log_density_discrete(d, thetas, y, support=it.support)
        ref = np.log(np.sum(rule.weights * np.exp(logf)))
        assert pp[0] == pytest.approx(ref, rel=1e-12)
