"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal."""

import os
import time

import numpy as np
import pytest

from helpers import random_policy
from mvmdp.diagnostics import (build_chain, build_chains, finite_difference,
                               optimality_condition_check, performance_derivative,
                               performance_difference)
from mvmdp.evaluation import evaluate
from mvmdp.grid import PseudoMeanCurve, segment_check, sweep
from mvmdp.mdp import pseudo_mean_domain
from mvmdp.models import build_random, state_index
from mvmdp.portfolio import (example_spec, moment_recursion_evaluate, pseudo_value,
                             simulate_portfolio, solve_closed_form)
from mvmdp.reproduce import inventory_report, queueing_report
from mvmdp.solver import EPS_FIX, solve
from oracles import best_mv

THREADS = os.cpu_count() or 1
COEF_TOL = 5e-4


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n{name} {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return report


def random_instance(seed, lam=1.0):
    rng = np.random.default_rng(seed)
    S, A, T = (int(v) for v in rng.integers(1, 4, 3))
    return build_random(seed, (S, A, T), outcome_rewards=bool(seed % 2), risk_aversion=lam)


def test_ac1_portfolio_closed_form(verdict):
    started = time.perf_counter()
    sol = solve_closed_form(example_spec(), 1.0)
    seconds = time.perf_counter() - started
    got = {"y* slope": sol.wealth_growth, "y* intercept": sol.y_intercept,
           "J* slope": sol.wealth_growth, "J* intercept": sol.mv_intercept}
    want = {"y* slope": 1.1697, "y* intercept": 8.9751, "J* slope": 1.1697,
            "J* intercept": 4.4876}
    for i, (a, b) in enumerate(zip((0.4004, 0.6496, 2.3133), (0.3887, 0.6240, 2.2247))):
        got[f"state[{i}]"], want[f"state[{i}]"] = sol.state_coefficient[0, i], a
        got[f"intercept[{i}]"], want[f"intercept[{i}]"] = sol.intercept_direction[0, i], b
    off = {k: got[k] - want[k] for k in want if abs(got[k] - want[k]) > COEF_TOL}
    detail = (f"{len(want) - len(off)}/{len(want)} coefficients within {COEF_TOL}; "
              + ", ".join(f"{k} {got[k]:.4f} vs {want[k]}" for k in off)
              + f"; y*(1)={sol.y_star:.4f} J*(1)={sol.mv_star:.4f} (reference 10.1, 5.7761);"
              f" {seconds:.3f}s")
    verdict("AC1", not off and seconds < 1.0, detail)


def test_ac2_portfolio_oracles(verdict):
    started = time.perf_counter()
    spec = example_spec()
    sol = solve_closed_form(spec, 1.0)
    mom = moment_recursion_evaluate(spec, sol.policy, 1.0)
    sim = simulate_portfolio(spec, sol.policy, 1.0, n_paths=1_000_000, seed=0)
    seconds = time.perf_counter() - started
    exact = abs(mom.mv - sol.mv_star)
    z_mean = abs(sim.mean - mom.mean) / sim.mean_se
    z_var = abs(sim.variance - mom.variance) / sim.variance_se
    ok = exact <= 1e-8 and z_mean <= 4 and z_var <= 4 and seconds < 30
    verdict("AC2", ok, f"|J_rec - J*|={exact:.2e}, MC mean {z_mean:.2f} SE, "
                       f"MC variance {z_var:.2f} SE, {seconds:.1f}s")


def test_ac3_queueing(verdict):
    rep = queueing_report(threads=THREADS)
    bad = "; ".join(f"{c.name} {c.observed:.4f}" for c in rep.failures)
    ok = rep.ok and rep.runtime < 600
    verdict("AC3", ok, f"{len(rep.checks) - len(rep.failures)}/{len(rep.checks)} checks, "
                       f"{rep.runtime:.0f}s" + (f"; failing: {bad}" if bad else ""))


def test_ac4_inventory(verdict):
    rep = inventory_report(threads=THREADS)
    bad = "; ".join(f"{c.name} {c.observed:.4f}" for c in rep.failures)
    ok = rep.ok and rep.runtime < 1200
    verdict("AC4", ok, f"{len(rep.checks) - len(rep.failures)}/{len(rep.checks)} checks, "
                       f"{rep.runtime:.0f}s" + (f"; failing: {bad}" if bad else ""))


def brute_force_part():
    h = 0.1
    worst = 0.0
    for seed in range(100):
        mdp = random_instance(seed)
        curve = sweep(mdp, 0, pseudo_mean_domain(mdp), h, fingerprints=False)
        best = best_mv(mdp, 0)
        slack = mdp.risk_aversion * h * h / 4 + 1e-8
        top = curve.global_max[1]
        if top > best + 1e-8:
            return False, f"grid above enumeration on seed {seed}"
        worst = max(worst, best - top)
        if best - top > slack:
            return False, f"seed {seed}: gap {best - top:.3g} > {slack:.3g}"
    return True, f"worst gap {worst:.2e}"


def solver_parts():
    drops, uncertified = 0, 0
    runs = 0
    for seed in range(100):
        mdp = random_instance(seed)
        for y0 in (-2.0, 0.0, 1.0, 4.0):
            rep = solve(mdp, 0, y0)
            runs += 1
            mv = [e.mv for e in rep.trace]
            drops += any(b < a - 1e-10 for a, b in zip(mv, mv[1:]))
            if rep.converged:
                chain = build_chain(mdp, rep.policy, 0, rep.policy.anchor, full=True)
                gap = abs(rep.y_star - rep.evaluation.mean)
                uncertified += gap > EPS_FIX or bool(optimality_condition_check(mdp, chain))
            else:
                uncertified += 1
    return (drops == 0, f"{runs} traces, {drops} with a drop"), \
        (uncertified == 0, f"{runs} runs, {uncertified} uncertified")


def curvature_part(queueing, inventory):
    results = []
    s = state_index(queueing, 5.0)
    q = segment_check(sweep(queueing, s, (-20.62, -20.56), 0.001))
    results.append(("queueing", q.ok, q.checked))
    inv = segment_check(sweep(inventory, 5, (-300.0, 400.0), 0.1))
    results.append(("inventory", inv.ok, inv.checked))
    spec = example_spec()
    ys = np.round(np.arange(0.0, 20.0 + 1e-9, 0.1), 10)
    curve = PseudoMeanCurve(0, 0.1, ys, pseudo_value(spec, 1.0, ys), ["closed-form"] * len(ys),
                            lam=spec.risk_aversion * float(np.prod(spec.c_factors())))
    port = segment_check(curve)
    results.append(("portfolio", port.ok, port.checked))
    return (all(ok for _, ok, _ in results),
            ", ".join(f"{n} {'ok' if ok else 'violated'} ({c} points)" for n, ok, c in results))


def identity_parts():
    worst_diff, worst_deriv, worst_decomp = 0.0, 0.0, 0.0
    for seed in range(200):
        lam = (0.0, 0.5, 1.0, 2.0)[seed % 4]
        mdp = random_instance(seed, lam)
        rng = np.random.default_rng(seed)
        u, v = random_policy(mdp, 0, 1.0, rng), random_policy(mdp, 0, 1.0, rng)
        eu, ev = evaluate(mdp, u, 0), evaluate(mdp, v, 0)
        cu, cv = build_chains(mdp, u, v, 0)
        worst_diff = max(worst_diff, abs(performance_difference(cu, cv) - (ev.mv - eu.mv)))
        fd = finite_difference(mdp, u, v, 0).extrapolated
        worst_deriv = max(worst_deriv,
                          abs(performance_derivative(cu, cv) - fd) / (1 + abs(fd)))
        for pol, base in ((u, eu), (v, ev)):
            for y0 in rng.uniform(-3.0, 6.0, 3):
                got = evaluate(mdp, pol.view(), 0, float(y0)).pseudo_mv
                worst_decomp = max(worst_decomp,
                                   abs(got - (base.mv - lam * (base.mean - y0) ** 2)))
    return ((worst_diff <= 1e-10 and worst_deriv <= 1e-6,
             f"difference err {worst_diff:.1e}, derivative rel err {worst_deriv:.1e}"),
            (worst_decomp <= 1e-10, f"decomposition err {worst_decomp:.1e}"))


def test_ac5_property_suite(verdict, queueing, inventory):
    started = time.perf_counter()
    parts = {"a": brute_force_part()}
    parts["b"], parts["c"] = solver_parts()
    parts["d"] = curvature_part(queueing, inventory)
    parts["e"], parts["f"] = identity_parts()
    seconds = time.perf_counter() - started
    ok = all(p[0] for p in parts.values()) and seconds < 300
    detail = "; ".join(f"{k}: {'ok' if p[0] else 'FAIL'} {p[1]}" for k, p in parts.items())
    verdict("AC5", ok, f"{detail}; {seconds:.0f}s")
