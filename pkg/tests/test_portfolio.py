import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvmdp.portfolio import (LinearPolicy, PortfolioError, PortfolioSpec, alternate,
                             example_spec, inner_policy, moment_recursion_evaluate,
                             pseudo_value, simulate_portfolio, solve_closed_form)

TOL = 5e-4


def one_asset(mean=0.1, var=0.04, horizon=1, riskless=1.0, lam=1.0):
    return PortfolioSpec.constant(horizon, riskless, [mean], [[var + mean * mean]], lam)


@st.composite
def specs(draw):
    T = draw(st.integers(1, 4))
    n = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 10**6))
    rng = np.random.default_rng(seed)
    e0 = rng.uniform(1.0, 1.1, T)
    mu = rng.uniform(-0.2, 0.3, (T, n))
    root = rng.normal(0, 0.3, (T, n, n))
    cov = root @ np.swapaxes(root, 1, 2) + 0.01 * np.eye(n)
    sig = cov + np.einsum("ti,tj->tij", mu, mu)
    return PortfolioSpec(e0, mu, sig, draw(st.sampled_from([0.5, 1.0, 2.0])))


@pytest.fixture(scope="module")
def sol():
    return solve_closed_form(example_spec(), 1.0)


class TestReferenceExample:
    def test_slope(self, sol):
        assert sol.wealth_growth == pytest.approx(1.04**4)
        assert sol.wealth_growth == pytest.approx(1.1697, abs=TOL)

    def test_mean_intercept(self, sol):
        assert sol.y_intercept == pytest.approx(8.9751, abs=TOL)

    def test_value_intercept(self, sol):
        assert sol.mv_intercept == pytest.approx(4.4876, abs=TOL)

    @pytest.mark.parametrize("i,want", [(0, 0.4004), (1, 0.6496), (2, 2.3133)])
    def test_state_coefficient(self, sol, i, want):
        assert sol.state_coefficient[0, i] == pytest.approx(want, abs=TOL)

    def test_intercept_direction(self, sol):
        np.testing.assert_allclose(sol.intercept_direction[0], (0.3887, 0.6240, 2.2247),
                                   atol=TOL)

    def test_stationary_coefficients(self, sol):
        np.testing.assert_allclose(sol.state_coefficient, sol.state_coefficient[[0] * 4])

    def test_intercepts_consistent(self, sol):
        # mean intercept is twice the value intercept for any spec
        assert sol.y_intercept == pytest.approx(2 * sol.mv_intercept, rel=1e-14)


class TestHandCases:
    def test_no_excess_return(self):
        spec = PortfolioSpec.constant(3, 1.05, [0.0], [[0.04]], 1.0)
        sol = solve_closed_form(spec, 2.0)
        assert sol.c_product == 1.0
        assert sol.y_star == pytest.approx(2.0 * 1.05**3)
        assert sol.mv_star == pytest.approx(sol.y_star)
        np.testing.assert_array_equal(sol.policy.offset, 0.0)

    def test_zero_policy(self):
        spec = example_spec()
        mom = moment_recursion_evaluate(spec, LinearPolicy.zero(spec), 3.0)
        assert mom.mean == pytest.approx(3.0 * 1.04**4)
        assert mom.variance == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("b", [0.0, 1.0, -2.5, 7.0])
    def test_single_period(self, b):
        spec = one_asset()
        pol = LinearPolicy(np.zeros((1, 1)), np.array([[b]]))
        mom = moment_recursion_evaluate(spec, pol, 1.0)
        assert mom.mean == pytest.approx(1.0 + 0.1 * b)
        assert mom.variance == pytest.approx(0.04 * b * b)

    def test_single_period_optimum(self):
        # maximize 0.1 b - λ 0.04 b² at b = 0.1 / (2 λ 0.04)
        spec = one_asset(lam=1.0)
        sol = solve_closed_form(spec, 1.0)
        b = sol.policy.action(0, 1.0)[0]
        assert b == pytest.approx(1.25)
        assert sol.mv_star == pytest.approx(1.0 + 0.125 - 0.0625)


class TestMoments:
    @settings(max_examples=40, deadline=None)
    @given(spec=specs(), y=st.floats(-5.0, 20.0), s0=st.floats(0.0, 3.0))
    def test_closed_form_pseudo_value(self, spec, y, s0):
        mom = moment_recursion_evaluate(spec, inner_policy(spec, y), s0)
        assert mom.pseudo_mv(y) == pytest.approx(pseudo_value(spec, s0, y),
                                                 abs=1e-9 * (1 + y * y))

    @settings(max_examples=40, deadline=None)
    @given(spec=specs(), seed=st.integers(0, 10**6))
    def test_inner_policy_dominates_affine(self, spec, seed):
        rng = np.random.default_rng(seed)
        pol = LinearPolicy(rng.normal(0, 1, spec.mean.shape), rng.normal(0, 1, spec.mean.shape))
        y = float(rng.uniform(0, 5))
        mom = moment_recursion_evaluate(spec, pol, 1.0)
        assert mom.pseudo_mv(y) <= pseudo_value(spec, 1.0, y) + 1e-9

    @settings(max_examples=40, deadline=None)
    @given(spec=specs(), s0=st.floats(-2.0, 3.0))
    def test_fixed_point(self, spec, s0):
        sol = solve_closed_form(spec, s0)
        mom = moment_recursion_evaluate(spec, inner_policy(spec, sol.y_star), s0)
        assert mom.mean == pytest.approx(sol.y_star, abs=1e-9 * (1 + abs(sol.y_star)))
        assert mom.mv == pytest.approx(sol.mv_star, abs=1e-9 * (1 + abs(sol.mv_star)))

    @settings(max_examples=30, deadline=None)
    @given(spec=specs())
    def test_linear_in_initial_wealth(self, spec):
        a, b = solve_closed_form(spec, 0.0), solve_closed_form(spec, 1.0)
        slope = np.prod(spec.riskless)
        assert b.y_star - a.y_star == pytest.approx(slope, rel=1e-10)
        assert b.mv_star - a.mv_star == pytest.approx(slope, rel=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(spec=specs())
    def test_curvature(self, spec):
        ys = np.array([-3.0, 0.0, 4.0])
        lead = np.polyfit(ys, pseudo_value(spec, 1.0, ys), 2)[0]
        pc = np.prod(spec.c_factors())
        assert lead == pytest.approx(-spec.risk_aversion * pc, abs=1e-9)


class TestSimulation:
    def test_agrees_with_recursion(self):
        spec = example_spec()
        pol = solve_closed_form(spec, 1.0).policy
        mom = moment_recursion_evaluate(spec, pol, 1.0)
        sim = simulate_portfolio(spec, pol, 1.0, n_paths=200_000, seed=1)
        assert abs(sim.mean - mom.mean) <= 4 * sim.mean_se
        assert abs(sim.variance - mom.variance) <= 4 * sim.variance_se

    def test_pseudo_mean_consistency(self):
        spec = example_spec()
        pol = inner_policy(spec, 5.0)
        sim = simulate_portfolio(spec, pol, 1.0, n_paths=200_000, seed=2)
        mc = sim.mean - spec.risk_aversion * (sim.variance + (sim.mean - 5.0) ** 2)
        assert mc == pytest.approx(pseudo_value(spec, 1.0, 5.0), abs=0.05)

    def test_reproducible(self):
        spec = example_spec()
        pol = inner_policy(spec, 3.0)
        a = simulate_portfolio(spec, pol, 1.0, n_paths=70_000, seed=5)
        b = simulate_portfolio(spec, pol, 1.0, n_paths=70_000, seed=5)
        assert a == b


class TestAlternation:
    @pytest.mark.parametrize("y0", [2.0, 5.0, 10.0, 12.0, 20.0])
    def test_converges_to_closed_form(self, y0):
        spec = example_spec()
        run = alternate(spec, 1.0, y0)
        assert run.converged
        assert run.y_star == pytest.approx(solve_closed_form(spec, 1.0).y_star, abs=1e-8)

    def test_values_increase(self):
        run = alternate(example_spec(), 1.0, 20.0)
        assert all(b >= a - 1e-12 for a, b in zip(run.mv, run.mv[1:]))
        assert all(v <= m + 1e-12 for v, m in zip(run.values, run.mv))


class TestValidation:
    def test_singular(self):
        spec = PortfolioSpec.constant(2, 1.0, [0.1, 0.1], [[1.0, 1.0], [1.0, 1.0]], 1.0)
        with pytest.raises(PortfolioError, match="positive definite"):
            solve_closed_form(spec, 1.0)

    def test_degenerate_embedding(self):
        # second moment below μ²: C < 0 and the implied covariance is negative
        spec = PortfolioSpec.constant(1, 1.0, [1.0], [[0.5]], 1.0)
        assert spec.warnings()
        with pytest.raises(PortfolioError, match="degenerate"):
            solve_closed_form(spec, 1.0)
        with pytest.raises(PortfolioError, match="semidefinite"):
            simulate_portfolio(spec, LinearPolicy.zero(spec), 1.0, n_paths=10)

    def test_bad_fields(self):
        with pytest.raises(PortfolioError):
            PortfolioSpec.constant(1, 1.0, [0.1], [[0.05]], 0.0)
        with pytest.raises(PortfolioError):
            PortfolioSpec.constant(1, -1.0, [0.1], [[0.05]], 1.0)
        with pytest.raises(PortfolioError):
            PortfolioSpec.constant(1, 1.0, [0.1, 0.2], [[0.05, 0.01], [0.0, 0.05]], 1.0)

    def test_document_broadcasting(self):
        spec = example_spec()
        doc = {"horizon": 4, "riskless": 1.04, "mean": spec.mean[0].tolist(),
               "second_moment": spec.second_moment[0].tolist(), "risk_aversion": 2.0}
        again = PortfolioSpec.from_dict(doc)
        np.testing.assert_array_equal(again.second_moment, spec.second_moment)
        assert PortfolioSpec.from_dict(again.as_dict()).as_dict() == again.as_dict()
