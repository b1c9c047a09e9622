"""Alternating pseudo-mean / inner-policy iteration with break-point escape."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .dp import EPS_TIE, AugmentedSolution, backward_induction, cached_box
from .evaluation import EvalResult, forward_pass, policy_moments
from .lattice import reward_grid
from .mdp import TabularMdp, ensure_valid
from .models import state_value
from .policies import ACTION_DTYPE, AugmentedPolicy, HistoryPolicyView, fingerprint

EPS_FIX = 1e-7
MAX_ITERS = 100
MAX_SWAPS = 10_000


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class TraceEntry:
    k: int
    y: float  # pseudo mean the inner problem was solved at
    mv: float  # J of the resulting policy
    inner_value: float  # optimal pseudo mean-variance at y
    mean: float  # mean reward of the resulting policy (next pseudo mean)
    kind: str = "improve"  # or "escape" for an adopted break-point swap


@dataclass(frozen=True)
class BreakPointEvent:
    iteration: int
    tied_cells: int
    candidates: int
    improved: bool
    gain: float = 0.0


@dataclass
class SolveReport:
    s0: int
    y0_init: float
    status: str
    trace: list = field(default_factory=list)
    events: list = field(default_factory=list)
    policy: AugmentedPolicy | None = None
    evaluation: EvalResult | None = None
    wall_time: float = 0.0
    cycle_detected: bool = False

    @property
    def converged(self) -> bool:
        return self.status != "max_iters"

    @property
    def y_star(self) -> float | None:
        return None if self.evaluation is None else self.evaluation.mean

    @property
    def mv_star(self) -> float | None:
        return None if self.evaluation is None else self.evaluation.mv

    @property
    def iterations(self) -> int:
        return sum(1 for e in self.trace if e.kind == "improve")

    def view(self) -> HistoryPolicyView:
        return self.policy.view()

    def as_dict(self) -> dict:
        return {
            "s0": self.s0,
            "y0_init": self.y0_init,
            "status": self.status,
            "iterations": self.iterations,
            "y_star": self.y_star,
            "mv_star": self.mv_star,
            "variance": None if self.evaluation is None else self.evaluation.variance,
            "trace": [{"k": e.k, "y": e.y, "mv": e.mv, "inner_value": e.inner_value,
                       "mean": e.mean, "kind": e.kind} for e in self.trace],
            "break_point_events": [vars(e) for e in self.events],
            "cycle_detected": self.cycle_detected,
        }


def myopic_policy(mdp: TabularMdp, s0: int, quantize: float | None = None) -> AugmentedPolicy:
    """Greedy policy on expected one-step reward (lowest index among ties)."""
    grid = reward_grid(mdp, quantize)
    box = cached_box(mdp, grid, s0)
    tables = []
    for t in range(mdp.horizon):
        er = np.where(mdp.admissible, mdp.stages[t].expected_reward(), -np.inf)
        best = np.argmax(er, axis=1).astype(ACTION_DTYPE)
        tab = np.full((mdp.num_states, box.width(t)), -1, dtype=ACTION_DTYPE)
        tab[box.states[t]] = best[box.states[t], None]
        tables.append(tab)
    return AugmentedPolicy(grid, box, 0.0, tuple(tables))


def same_on_common_cells(a: AugmentedPolicy, b: AugmentedPolicy, masks_a, masks_b) -> bool:
    """Action tables agree on every cell reached under both policies."""
    for t in range(a.horizon):
        common = masks_a[t] & masks_b[t]
        if not np.array_equal(a.tables[t][common], b.tables[t][common]):
            return False
    return True


def solve(mdp: TabularMdp, s0: int, y0_init: float | None = None, *, max_iters: int = MAX_ITERS,
          eps_fix: float = EPS_FIX, eps_tie: float = EPS_TIE, quantize: float | None = None,
          escape: bool = True, max_swaps: int = MAX_SWAPS) -> SolveReport:
    """Alternate inner backward induction and pseudo-mean updates from ``y0_init``.

    The default start is the mean reward of the myopic policy.  At a fixed
    point, single-cell swaps among tied actions are tried; an improving one
    is adopted and the iteration resumes.
    """
    started = time.perf_counter()
    ensure_valid(mdp)
    grid = reward_grid(mdp, quantize)
    if y0_init is None:
        fp = forward_pass(mdp, grid, s0, (myopic_policy(mdp, s0, quantize), 0))
        y0_init = fp.moments()[0]
    report = SolveReport(int(s0), float(y0_init), "max_iters")
    y = float(y0_init)
    incumbent = None
    inc_masks = None
    seen = set()
    escaped = False
    k = 0
    while k < max_iters:
        k += 1
        sol = backward_induction(mdp, s0, y, quantize=quantize, incumbent=incumbent,
                                 eps_tie=eps_tie)
        pol = sol.policy
        fp = forward_pass(mdp, grid, s0, (pol, 0))
        ev = _result(fp, mdp.risk_aversion, y)
        report.trace.append(TraceEntry(k, y, ev.mv, sol.value, ev.mean))
        masks = [m != 0 for m in fp.mass]
        report.policy, report.evaluation = pol, ev
        fixed = (incumbent is not None and abs(ev.mean - y) <= eps_fix
                 and same_on_common_cells(pol, incumbent, masks, inc_masks))
        key = (fingerprint(pol, 0, masks, fp.box), round(y, 12))
        report.cycle_detected |= key in seen and not fixed
        seen.add(key)
        if fixed:
            swap = _escape(mdp, s0, sol, fp, ev, k, report, eps_fix, max_swaps) if escape else None
            if swap is None:
                report.status = "break_point_escaped_then_converged" if escaped else "converged"
                break
            escaped = True
            pol, fp, ev = swap
            masks = [m != 0 for m in fp.mass]
            report.trace.append(TraceEntry(k, y, ev.mv, ev.pseudo_mv_at(y), ev.mean, "escape"))
            report.policy, report.evaluation = pol, ev
        incumbent, inc_masks = pol, masks
        y = ev.mean
    report.wall_time = time.perf_counter() - started
    return report


def _result(fp, lam, y) -> EvalResult:
    m1, m2 = fp.moments()
    return EvalResult.from_moments(m1, m2, lam, y)


def _escape(mdp, s0, sol: AugmentedSolution, fp, ev: EvalResult, k, report, eps_fix, max_swaps):
    """Best improving single-cell swap among tied actions, or None."""
    pol = sol.policy
    box = fp.box
    grid = pol.grid
    lam = mdp.risk_aversion
    act_ptr, act_idx = mdp.action_csr
    hits = [np.nonzero((fp.mass[t] != 0) & (sol.ties[t] >= 2)) for t in range(mdp.horizon)]
    tied = sum(len(s) for s, _ in hits)
    if tied == 0:
        return None
    _, f1, f2 = policy_moments(mdp, pol, 0, s0)
    best = None
    used = 0
    for t, (cs, cc) in enumerate(hits):
        if len(cs) == 0 or used >= max_swaps:
            continue
        stage = mdp.stages[t]
        du, ou = grid.stage_units(t)
        mv, i, a, n = _kernels.best_tied_swap(
            cs.astype(np.int64), cc.astype(np.int64), box.klo[t], act_ptr, act_idx,
            stage.post_state, stage.decision_reward, du, stage.ptr, stage.next_state,
            stage.prob, stage.reward, ou, box.klo[t + 1], sol.values[t + 1], f1[t + 1],
            f2[t + 1], f1[t], f2[t], fp.mass[t], fp.m1[t], pol.tables[t], sol.eps_tie,
            ev.mean, ev.second_moment, lam, max_swaps - used)
        used += n
        if i >= 0 and (best is None or mv > best[0]):
            best = (mv, t, int(cs[i]), int(box.klo[t] + cc[i]), int(a))
    result = None
    if best is not None and best[0] > ev.mv + eps_fix:
        _, t, s, kk, a = best
        swapped = pol.with_action(t, s, kk, a)
        sfp = forward_pass(mdp, grid, s0, (swapped, 0))
        sev = _result(sfp, lam, pol.anchor)
        if sev.mv > ev.mv + eps_fix:
            result = (swapped, sfp, sev)
    gain = 0.0 if result is None else result[2].mv - ev.mv
    report.events.append(BreakPointEvent(k, tied, used, result is not None, gain))
    return result


@dataclass
class MultiStartResult:
    reports: list
    best: SolveReport
    optima: list  # distinct converged (y*, J*) pairs, best first

    @property
    def disagreement(self) -> bool:
        return len(self.optima) > 1

    def as_dict(self) -> dict:
        return {"best": self.best.as_dict(),
                "optima": [{"y_star": y, "mv_star": j} for y, j in self.optima],
                "disagreement": self.disagreement,
                "runs": [r.as_dict() for r in self.reports]}


def solve_multi_start(mdp: TabularMdp, s0: int, y0_inits, *, threads: int = 1,
                      tol: float = 1e-6, **opts) -> MultiStartResult:
    """Independent solves from each start; reports are in input order."""
    inits = list(y0_inits)
    if not inits:
        raise ValueError("need at least one initial pseudo mean")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(lambda y: solve(mdp, s0, y, **opts), inits))
    else:
        reports = [solve(mdp, s0, y, **opts) for y in inits]
    done = [r for r in reports if r.converged]
    pool_ = done or [r for r in reports if r.evaluation is not None]
    if not pool_:
        raise SolverError("no solve produced a policy")
    best = max(pool_, key=lambda r: r.mv_star)
    optima = []
    for r in sorted(done, key=lambda r: -r.mv_star):
        if all(abs(r.y_star - y) > tol or abs(r.mv_star - j) > tol for y, j in optima):
            optima.append((r.y_star, r.mv_star))
    return MultiStartResult(reports, best, optima)


@dataclass(frozen=True)
class Extrapolation:
    slope: float
    intercept: float
    points: tuple
    target_s0: int
    predicted: float


def linear_structure_extrapolate(mdp: TabularMdp, s0_a: int, s0_b: int, target_s0: int, *,
                                 y_a: float | None = None, y_b: float | None = None,
                                 **solve_opts) -> Extrapolation:
    """Predict y* at ``target_s0`` from a line through two solved initial states.

    States enter through their physical values (``models.state_value``).
    Missing optima ``y_a``/``y_b`` are obtained with :func:`solve`.
    """
    if not mdp.metadata.get("linear_convex"):
        raise ValueError("model is not flagged linear-convex; extrapolation refused")
    xa, xb = state_value(mdp, s0_a), state_value(mdp, s0_b)
    if xa == xb:
        raise ValueError("degenerate fit: the two initial states coincide")
    for name, y, s in (("a", y_a, s0_a), ("b", y_b, s0_b)):
        if y is None:
            rep = solve(mdp, s, **solve_opts)
            if not rep.converged:
                raise SolverError(f"solve at s0={s} did not converge")
            if name == "a":
                y_a = rep.y_star
            else:
                y_b = rep.y_star
    slope = (y_b - y_a) / (xb - xa)
    intercept = y_a - slope * xa
    pred = slope * state_value(mdp, target_s0) + intercept
    return Extrapolation(slope, intercept, ((xa, y_a), (xb, y_b)), int(target_s0), pred)
