"""Grid search over the pseudo mean: optimal Ĵ*_0(s0, y0) on a uniform y0 grid.

Because V_t(s, y) does not depend on the root, all grid points whose
pseudo means differ by whole reward units share one backward pass: the grid
splits into residue classes modulo the reward unit and each class is one
multi-root box.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .dp import EPS_TIE, cached_box, solve_box
from .evaluation import forward_pass
from .lattice import make_box, reward_grid
from .mdp import TabularMdp, ensure_valid
from .policies import AugmentedPolicy, fingerprint

MAX_CLASSES = 100_000


@dataclass
class PseudoMeanCurve:
    s0: int
    step: float
    y: np.ndarray
    values: np.ndarray
    fingerprints: list | None = None
    runtime: float = 0.0
    lam: float = 0.0

    @property
    def seconds_per_point(self) -> float:
        return self.runtime / len(self.y)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.values))

    @property
    def global_max(self) -> tuple[float, float]:
        i = self.argmax
        return float(self.y[i]), float(self.values[i])

    @property
    def segments(self) -> np.ndarray | None:
        """Segment id per grid point; a new segment starts where the fingerprint changes."""
        if self.fingerprints is None:
            return None
        change = [a != b for a, b in zip(self.fingerprints[:-1], self.fingerprints[1:])]
        return np.concatenate([[0], np.cumsum(change)]).astype(np.int64)

    @property
    def boundaries(self) -> list[float]:
        seg = self.segments
        if seg is None:
            return []
        return [float(self.y[i]) for i in np.flatnonzero(np.diff(seg)) + 1]

    def rows(self):
        seg = self.segments
        for i in range(len(self.y)):
            yield (float(self.y[i]), float(self.values[i]),
                   None if seg is None else self.fingerprints[i],
                   None if seg is None else int(seg[i]))


def _classes(lo: float, n: int, step: float, unit: float):
    """Split grid points lo + j*step (j = 0..n) into classes sharing a reward lattice.

    Yields (anchor, point indices, reward index of each point).
    """
    ratio = Fraction(step / unit).limit_denominator(MAX_CLASSES)
    exact = abs(float(ratio) - step / unit) <= 1e-9 * (step / unit)
    if not exact or ratio.denominator > n + 1:
        for j in range(n + 1):
            yield lo + j * step, np.array([j]), np.array([0])
        return
    p, q = ratio.numerator, ratio.denominator
    for c in range(min(q, n + 1)):
        idx = np.arange(c, n + 1, q)
        i = (idx - c) // q
        yield lo + c * step, idx, -p * i


def sweep_many(mdp: TabularMdp, s0_list, interval, step: float, *, quantize: float | None = None,
               fingerprints: bool = True, eps_tie: float = EPS_TIE, threads: int = 1
               ) -> dict[int, PseudoMeanCurve]:
    """Ĵ*_0(s0, y0) on the grid for several initial states at once."""
    ensure_valid(mdp)
    lo, hi = float(interval[0]), float(interval[1])
    if not step > 0 or hi < lo:
        raise ValueError("need step > 0 and a nonempty interval")
    n = int(round((hi - lo) / step))
    s0_list = [int(s) for s in s0_list]
    grid = reward_grid(mdp, quantize)
    values = {s: np.empty(n + 1) for s in s0_list}
    prints = {s: [None] * (n + 1) for s in s0_list} if fingerprints else None
    started = time.perf_counter()

    def run(cls):
        anchor, idx, ks = cls
        box = make_box(mdp, grid, s0_list, (int(ks.min()), int(ks.max())))
        vals, tables, _ = solve_box(mdp, grid, box, anchor, eps_tie=eps_tie,
                                    keep_values=False)
        pol = AugmentedPolicy(grid, box, anchor, tuple(tables))
        for s in s0_list:
            values[s][idx] = vals[0][s, ks - box.klo[0]]
            if prints is not None:
                for j, k in zip(idx, ks):
                    prints[s][j] = _point_fingerprint(mdp, grid, s, pol, int(k))

    classes = list(_classes(lo, n, step, grid.unit))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, classes))
    else:
        for cls in classes:
            run(cls)
    runtime = time.perf_counter() - started
    ys = lo + step * np.arange(n + 1)
    return {s: PseudoMeanCurve(s, step, ys, values[s], None if prints is None else prints[s],
                               runtime, mdp.risk_aversion) for s in s0_list}


def _point_fingerprint(mdp, grid, s0, pol, k):
    fp = forward_pass(mdp, grid, s0, (pol, k))
    return fingerprint(pol, k, [m != 0 for m in fp.mass], cached_box(mdp, grid, s0))


def sweep(mdp: TabularMdp, s0: int, interval, step: float, **kwargs) -> PseudoMeanCurve:
    """Ĵ*_0(s0, ·) on the grid interval[0], interval[0] + step, ..., interval[1]."""
    return sweep_many(mdp, [s0], interval, step, **kwargs)[int(s0)]


@dataclass
class SegmentReport:
    checked: int
    violations: list = field(default_factory=list)  # (index, y, second difference, expected)

    @property
    def ok(self) -> bool:
        return not self.violations


def segment_check(curve: PseudoMeanCurve, lam: float | None = None, rtol: float = 1e-6
                  ) -> SegmentReport:
    """Second differences inside constant-fingerprint segments equal -2 λ h²."""
    if curve.fingerprints is None:
        raise ValueError("segment check needs a curve with fingerprints")
    lam = curve.lam if lam is None else lam
    seg = curve.segments
    v = curve.values
    expected = -2.0 * lam * curve.step**2
    scale = 1.0 + float(np.max(np.abs(v)))
    tol = rtol * abs(expected) + 1e-12 * scale
    report = SegmentReport(0)
    for j in range(1, len(v) - 1):
        if not seg[j - 1] == seg[j] == seg[j + 1]:
            continue
        report.checked += 1
        d2 = v[j - 1] - 2 * v[j] + v[j + 1]
        if abs(d2 - expected) > tol:
            report.violations.append((j, float(curve.y[j]), float(d2), expected))
    return report


@dataclass(frozen=True)
class LocalMax:
    y: float
    value: float
    is_global: bool
    matched_solves: tuple = ()


def local_maxima(curve: PseudoMeanCurve, solved_optima=(), match_tol: float | None = None
                 ) -> list[LocalMax]:
    """Grid local maxima (plateaus count once) with optional solver cross-reference.

    ``solved_optima`` are converged y* values; each is attached to the local
    maximum within ``match_tol`` (default: one grid step) of it.
    """
    v = curve.values
    n = len(v)
    tol = 1e-12 * (1.0 + float(np.max(np.abs(v))))
    match_tol = curve.step if match_tol is None else match_tol
    top = float(v.max())
    out = []
    j = 0
    while j < n:
        e = j
        while e + 1 < n and abs(v[e + 1] - v[j]) <= tol:
            e += 1
        left_ok = j == 0 or v[j - 1] < v[j] - tol
        right_ok = e == n - 1 or v[e + 1] < v[j] - tol
        if left_ok and right_ok:
            mid = (j + e) // 2
            y = float(curve.y[mid])
            hits = tuple(float(s) for s in solved_optima
                         if curve.y[j] - match_tol <= s <= curve.y[e] + match_tol)
            out.append(LocalMax(y, float(v[mid]), bool(abs(v[mid] - top) <= tol), hits))
        j = e + 1
    return out
