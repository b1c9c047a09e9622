import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import chain_mdp, random_policy
from mvmdp.diagnostics import (build_chain, build_chains, finite_difference,
                               optimality_condition_check, performance_derivative,
                               performance_difference)
from mvmdp.dp import backward_induction
from mvmdp.evaluation import evaluate
from mvmdp.models import build_random


def pair(seed, lam=1.0, y0=1.0):
    mdp = build_random(seed, (3, 3, 3), outcome_rewards=bool(seed % 2), risk_aversion=lam)
    rng = np.random.default_rng(seed)
    return mdp, random_policy(mdp, 0, y0, rng), random_policy(mdp, 0, y0, rng)


def first_cell(chain, t, accept):
    for s, k, a in zip(chain.states[t], chain.ks[t], chain.actions[t]):
        if accept(int(s), int(k), int(a)):
            return int(s), int(k), int(a)
    return None


class TestChain:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), lam=st.sampled_from([0.0, 0.5, 2.0]))
    def test_matches_evaluation(self, seed, lam):
        mdp, u, _ = pair(seed, lam)
        chain = build_chain(mdp, u, 0)
        ev = evaluate(mdp, u, 0)
        assert chain.mean == pytest.approx(ev.mean, abs=1e-12)
        assert chain.mv == pytest.approx(ev.mv, abs=1e-10)
        assert chain.recursion_residual() <= 1e-12

    def test_deterministic_chain(self):
        chain = build_chain(chain_mdp(), backward_induction(chain_mdp(), 0, 3.0).policy, 0)
        assert chain.y0 == 3.0
        assert chain.pseudo_mv == 3.0
        assert [len(s) for s in chain.states] == [1, 1, 1]

    def test_distributions_are_probabilities(self):
        mdp, u, v = pair(4)
        for chain in build_chains(mdp, u, v, 0, full=True):
            for pi in chain.distributions():
                assert pi.sum() == pytest.approx(1.0, abs=1e-12)
                assert pi.min() >= 0.0


class TestDifference:
    @pytest.mark.parametrize("seed", range(10))
    def test_identical_policies(self, seed):
        mdp, u, _ = pair(seed)
        cu, cv = build_chains(mdp, u, u, 0)
        assert performance_difference(cu, cv) == 0.0
        assert performance_derivative(cu, cv) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10**6), lam=st.sampled_from([0.0, 1.0, 3.0]),
           y0=st.one_of(st.none(), st.floats(-3.0, 5.0)))
    def test_matches_direct(self, seed, lam, y0):
        mdp, u, v = pair(seed, lam)
        cu, cv = build_chains(mdp, u, v, 0, y0)
        direct = evaluate(mdp, v, 0).mv - evaluate(mdp, u, 0).mv
        assert performance_difference(cu, cv) == pytest.approx(direct, abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_risk_neutral_reduces_to_mean_difference(self, seed):
        mdp, u, v = pair(seed, lam=0.0)
        cu, cv = build_chains(mdp, u, v, 0)
        want = evaluate(mdp, v, 0).mean - evaluate(mdp, u, 0).mean
        assert performance_difference(cu, cv) == pytest.approx(want, abs=1e-12)

    def test_incompatible(self):
        mdp, u, v = pair(2)
        with pytest.raises(ValueError, match="common universe"):
            performance_difference(build_chain(mdp, u, 0, 1.0), build_chain(mdp, v, 0, 2.0))


class TestDerivative:
    @pytest.mark.parametrize("seed", range(12))
    def test_matches_finite_difference(self, seed):
        mdp, u, v = pair(seed, lam=1.5)
        cu, cv = build_chains(mdp, u, v, 0)
        got = performance_derivative(cu, cv)
        fd = finite_difference(mdp, u, v, 0).extrapolated
        assert got == pytest.approx(fd, abs=1e-6 * (1 + abs(fd)))

    @pytest.mark.parametrize("seed", range(5))
    def test_root_pseudo_mean_irrelevant(self, seed):
        mdp, u, v = pair(seed)
        base = performance_derivative(*build_chains(mdp, u, v, 0))
        for y0 in (-2.0, 0.0, 4.5):
            assert performance_derivative(*build_chains(mdp, u, v, 0, y0)) == pytest.approx(
                base, abs=1e-10)

    def test_richardson_order(self):
        mdp, u, v = pair(7, lam=2.0)
        fd = finite_difference(mdp, u, v, 0, steps=(1e-2, 5e-3))
        exact = performance_derivative(*build_chains(mdp, u, v, 0))
        assert abs(fd.extrapolated - exact) <= abs(fd.centered[1] - exact) + 1e-12


class TestOptimalityScan:
    def solved(self, seed, y0=1.0):
        mdp = build_random(seed, (3, 3, 3), outcome_rewards=True, risk_aversion=1.0)
        return mdp, backward_induction(mdp, 0, y0)

    @pytest.mark.parametrize("seed", range(8))
    def test_dp_policy_clean(self, seed):
        mdp, sol = self.solved(seed)
        assert optimality_condition_check(mdp, build_chain(mdp, sol.policy, 0, 1.0,
                                                           full=True)) == []

    @pytest.mark.parametrize("seed", range(8))
    def test_worse_action_flagged(self, seed):
        mdp, sol = self.solved(seed)
        T = mdp.horizon
        chain = build_chain(mdp, sol.policy, 0, 1.0, full=True)

        def strictly_worse(s, k, a):
            return len(sol.tied_actions(T - 1, s, k)) < len(mdp.actions(s))

        cell = first_cell(chain, T - 1, strictly_worse)
        if cell is None:
            pytest.skip("no cell with a strictly worse action")
        s, k, a = cell
        q = sol.q_values(T - 1, s, k)
        worse = min(q, key=q.get)
        bad = sol.policy.with_action(T - 1, s, k, worse)
        found = optimality_condition_check(mdp, build_chain(mdp, bad, 0, 1.0, full=True))
        last = [(v.s, v.action, v.better_action) for v in found if v.t == T - 1]
        assert last == [(s, worse, a)]
        assert all(v.t <= T - 1 for v in found)
        hit = next(v for v in found if v.t == T - 1)
        assert hit.gain == pytest.approx(q[a] - q[worse], abs=1e-12)

    def test_tied_action_not_flagged(self):
        mdp = build_random(0, (3, 3, 3), risk_aversion=0.0)
        sol = backward_induction(mdp, 0, 1.0)
        chain = build_chain(mdp, sol.policy, 0, 1.0, full=True)
        for t in range(mdp.horizon):
            cell = first_cell(chain, t, lambda s, k, a: len(sol.tied_actions(t, s, k)) > 1)
            if cell is not None:
                break
        else:
            pytest.fail("fixture instance has no ties")
        s, k, a = cell
        other = next(b for b in sol.tied_actions(t, s, k) if b != a)
        alt = sol.policy.with_action(t, s, k, other)
        assert optimality_condition_check(mdp, build_chain(mdp, alt, 0, 1.0, full=True)) == []
