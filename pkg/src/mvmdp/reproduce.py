"""End-to-end experiment recipes with pass/fail checks against reference numbers."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dp import backward_induction
from .evaluation import evaluate
from .grid import local_maxima, sweep_many
from .models import build_inventory, build_queueing, state_index
from .portfolio import (alternate, example_spec, moment_recursion_evaluate, pseudo_value,
                        simulate_portfolio, solve_closed_form)
from .solver import linear_structure_extrapolate, solve_multi_start

COEF_TOL = 5e-4
QUEUE_TOL = 0.02
QUEUE_TARGETS = {4.0: -16.59, 5.0: -20.59, 6.0: -24.59}
QUEUE_INITS = (-44.0, -30.0, -10.0, 0.0)
INVENTORY_INITS = (-500.0, -50.0, 0.0, 60.0, 500.0)
INVENTORY_TABLE = {  # s0: (y*, variance, J*)
    0: (54.4, 67.35, -80.3), 1: (57.2, 68.1, -79.0), 2: (59.7, 69.75, -79.8),
    3: (62.4, 72.5, -82.6), 4: (64.6, 76.15, -87.7), 5: (67.0, 81.45, -95.9),
    6: (69.1, 88.3, -107.5), 7: (70.7, 96.8, -122.9), 8: (72.2, 107.1, -142.0),
    9: (73.3, 118.85, -164.4), 10: (74.0, 131.65, -189.3),
}


@dataclass
class Check:
    name: str
    observed: float
    expected: float | None = None
    tol: float | None = None
    passed: bool | None = None  # None: reported only
    note: str = ""

    @classmethod
    def near(cls, name, observed, expected, tol, note=""):
        ok = bool(abs(observed - expected) <= tol)
        return cls(name, float(observed), float(expected), tol, ok, note)

    @classmethod
    def holds(cls, name, observed, passed, note=""):
        return cls(name, float(observed), None, None, bool(passed), note)

    def as_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class Report:
    experiment: str
    checks: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    runtime: float = 0.0

    @property
    def ok(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if c.passed is False]

    def table(self) -> str:
        lines = []
        for c in self.checks:
            status = "info" if c.passed is None else ("pass" if c.passed else "FAIL")
            exp = "" if c.expected is None else f" expected {c.expected:.6g}"
            if c.tol is not None:
                exp += f" ±{c.tol:.3g}"
            note = f"  ({c.note})" if c.note else ""
            lines.append(f"{status:4s}  {c.name}: {c.observed:.6g}{exp}{note}")
        return "\n".join(lines)

    def as_dict(self) -> dict:
        return {"experiment": self.experiment, "ok": self.ok, "runtime": self.runtime,
                "checks": [c.as_dict() for c in self.checks], "details": self.details}


def portfolio_report(n_paths: int = 1_000_000, seed: int = 0) -> Report:
    started = time.perf_counter()
    spec = example_spec()
    rep = Report("portfolio-ex1")
    sol = solve_closed_form(spec, 1.0)
    add = rep.checks.append
    add(Check.near("y* slope", sol.wealth_growth, 1.1697, COEF_TOL))
    add(Check.near("y* intercept", sol.y_intercept, 8.9751, COEF_TOL))
    add(Check.near("J* slope", sol.wealth_growth, 1.1697, COEF_TOL))
    add(Check.near("J* intercept", sol.mv_intercept, 4.4876, COEF_TOL))
    for i, v in enumerate((0.4004, 0.6496, 2.3133)):
        add(Check.near(f"state coefficient[{i}]", sol.state_coefficient[0, i], v, COEF_TOL))
    for i, v in enumerate((0.3887, 0.6240, 2.2247)):
        add(Check.near(f"intercept direction[{i}]", sol.intercept_direction[0, i], v, COEF_TOL))
    add(Check("y* at s0=1 (reference 10.1)", sol.y_star, 10.1, None, None))
    add(Check("J* at s0=1 (reference 5.7761)", sol.mv_star, 5.7761, None, None,
              "closed form and reference value disagree"))

    mom = moment_recursion_evaluate(spec, sol.policy, 1.0)
    add(Check.near("moment recursion J of optimal policy", mom.mv, sol.mv_star, 1e-8))
    add(Check.near("moment recursion mean = y*", mom.mean, sol.y_star, 1e-8))
    sim = simulate_portfolio(spec, sol.policy, 1.0, n_paths, seed)
    add(Check.near("Monte-Carlo mean", sim.mean, mom.mean, 4 * sim.mean_se, "4 standard errors"))
    add(Check.near("Monte-Carlo variance", sim.variance, mom.variance, 4 * sim.variance_se,
                   "4 standard errors"))
    runs = {y0: alternate(spec, 1.0, y0) for y0 in (2.0, 5.0, 10.0, 12.0, 20.0)}
    for y0, run in runs.items():
        add(Check.near(f"alternation from y={y0:g}", run.y_star, sol.y_star, 1e-8))
    ys = np.array([0.0, 10.0, 20.0])
    vals = pseudo_value(spec, 1.0, ys)
    lead = np.polyfit(ys, vals, 2)[0]
    add(Check.near("pseudo value curvature", lead, -spec.risk_aversion * sol.c_product, 1e-10))
    rep.details = {"solution": sol.as_dict(), "simulation": sim.as_dict(),
                   "alternation_iterations": {str(k): len(v.y) - 1 for k, v in runs.items()}}
    rep.runtime = time.perf_counter() - started
    return rep


def queueing_report(threads: int = 1, inits=QUEUE_INITS, step: float = 0.01) -> Report:
    started = time.perf_counter()
    mdp = build_queueing()
    rep = Report("queueing")
    add = rep.checks.append
    index = {v: state_index(mdp, v) for v in QUEUE_TARGETS}
    found = {}
    runs = {}
    for value, target in QUEUE_TARGETS.items():
        ms = solve_multi_start(mdp, index[value], inits, threads=threads)
        runs[value] = ms
        found[value] = ms.best.y_star
        for y0, r in zip(inits, ms.reports):
            if not r.converged:
                add(Check.holds(f"s0={value:g} start {y0:g} converged", 0, False, r.status))
                continue
            add(Check.near(f"s0={value:g} start {y0:g}: y*", r.y_star, target, QUEUE_TOL))
    lo, hi = -44.0, 0.0
    curves = sweep_many(mdp, list(index.values()), (lo, hi), step, fingerprints=False,
                        threads=threads)
    for value, s in index.items():
        lm = local_maxima(curves[s])
        y, j = curves[s].global_max
        add(Check.holds(f"s0={value:g}: grid local maxima", len(lm), len(lm) == 1))
        add(Check.near(f"s0={value:g}: grid y*", y, QUEUE_TARGETS[value], QUEUE_TOL))
    ex = linear_structure_extrapolate(mdp, index[4.0], index[5.0], index[6.0],
                                      y_a=found[4.0], y_b=found[5.0])
    add(Check.near("extrapolated y* at s0=6", ex.predicted, QUEUE_TARGETS[6.0], QUEUE_TOL))
    rep.details = {
        "multi_start": {str(v): ms.as_dict() for v, ms in runs.items()},
        "grid": {str(v): {"y_star": curves[s].global_max[0], "value": curves[s].global_max[1]}
                 for v, s in index.items()},
        "extrapolation": {"slope": ex.slope, "intercept": ex.intercept, "predicted": ex.predicted},
    }
    rep.runtime = time.perf_counter() - started
    return rep


def inventory_report(threads: int = 1, inits=INVENTORY_INITS, step: float = 0.1) -> Report:
    started = time.perf_counter()
    mdp = build_inventory()
    rep = Report("inventory")
    add = rep.checks.append
    states = sorted(INVENTORY_TABLE)
    curves = sweep_many(mdp, states, (-300.0, 400.0), step, fingerprints=False, threads=threads)
    grid_rows = {}
    best_j = {}
    for s in states:
        y, jhat = curves[s].global_max
        ev = evaluate(mdp, backward_induction(mdp, s, y).policy, s)
        grid_rows[s] = {"y_star": y, "pseudo_mv": jhat, "mean": ev.mean,
                        "variance": ev.variance, "mv": ev.mv}
        ty, tv, tj = INVENTORY_TABLE[s]
        add(Check.near(f"s0={s}: y*", y, ty, 0.1 + 1e-9))
        add(Check.near(f"s0={s}: variance", ev.variance, tv, 0.1 + 1e-9))
        add(Check.near(f"s0={s}: J*", ev.mv, tj, 0.2 + 1e-9))
        best_j[s] = max(ev.mv, jhat)
    multi = {}
    worse = []
    for s in states:
        ms = solve_multi_start(mdp, s, inits, threads=threads)
        multi[s] = ms
        best = max([best_j[s]] + [r.mv_star for r in ms.reports if r.converged])
        if s <= 4:
            ok = all(r.converged and abs(r.mv_star - INVENTORY_TABLE[s][2]) <= 0.2 + 1e-9
                     for r in ms.reports)
            worst = min(r.mv_star for r in ms.reports)
            add(Check.holds(f"s0={s}: every start reaches the table optimum", worst, ok,
                            "worst start J shown"))
        else:
            gap = best - min(r.mv_star for r in ms.reports if r.converged)
            if gap > 1e-6:
                worse.append(s)
        if 500.0 in inits:
            r500 = ms.reports[list(inits).index(500.0)]
            add(Check.holds(f"s0={s}: start 500 reaches the global optimum", r500.mv_star,
                            r500.converged and r500.mv_star >= best - 1e-6,
                            f"best known {best:.6f}"))
    add(Check.holds("some s0 in 5..10 has a start stuck at a worse local optimum", len(worse),
                    bool(worse), f"s0 = {worse}"))
    rep.details = {"grid": {str(s): row for s, row in grid_rows.items()},
                   "multi_start": {str(s): ms.as_dict() for s, ms in multi.items()}}
    rep.runtime = time.perf_counter() - started
    return rep


EXPERIMENTS = {
    "portfolio-ex1": portfolio_report,
    "queueing": queueing_report,
    "inventory": inventory_report,
}


def reproduce(experiment: str, threads: int = 1) -> Report:
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {sorted(EXPERIMENTS)}")
    fn = EXPERIMENTS[experiment]
    return fn() if experiment == "portfolio-ex1" else fn(threads=threads)
