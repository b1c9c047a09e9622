"""Integer reward indexing of the pseudo-mean coordinate.

Along any trajectory y_t = y0 - (accumulated reward).  When all one-step
rewards are integer multiples of a common unit, y_t = y0 - unit * k with an
integer reward index k, so augmented states become (s, k) cells.  With
quantization the rewards are snapped to multiples of Δy for indexing only;
values and moments still use the exact rewards.

A :class:`Box` is a per-stage rectangle (reachable states) x [klo_t, khi_t]
that contains every reachable cell; all tables are stored on boxes.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import gcd, lcm

import numpy as np

from . import _kernels
from .mdp import TabularMdp, ensure_valid

LATTICE_CAP = 50_000_000
Y_DECIMALS = 12
RATIONAL_TOL = 1e-9
MAX_DENOMINATOR = 10**6


class LatticeError(RuntimeError):
    """The exact lattice cannot be built (too large or incommensurate rewards)."""


@dataclass(frozen=True, eq=False)
class RewardGrid:
    unit: float
    exact: bool
    decision_units: tuple  # per stage, (S, A) int64
    outcome_units: tuple  # per stage, (nnz,) int64
    max_snap: float  # worst |r - unit * round(r / unit)| over one step

    def stage_units(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        return self.decision_units[t], self.outcome_units[t]


def _unit_of(values: np.ndarray) -> float:
    values = np.unique(np.round(np.abs(values[values != 0]), Y_DECIMALS))
    if len(values) == 0:
        return 1.0
    fracs = []
    for v in values:
        f = Fraction(float(v)).limit_denominator(MAX_DENOMINATOR)
        if abs(float(f) - v) > RATIONAL_TOL * max(1.0, abs(v)):
            raise LatticeError(
                f"reward {v!r} is not commensurate with the others; enable quantization (Δy)"
            )
        fracs.append(f)
    den = lcm(*(f.denominator for f in fracs))
    if den > MAX_DENOMINATOR:
        raise LatticeError("rewards share no common unit; enable quantization (Δy)")
    num = gcd(*(f.numerator * (den // f.denominator) for f in fracs))
    return num / den


def reward_grid(mdp: TabularMdp, quantize: float | None = None) -> RewardGrid:
    """Reward indexing for ``mdp``: exact common unit, or Δy = ``quantize``."""
    key = ("grid", quantize)
    if key in mdp._cache:
        return mdp._cache[key]
    ensure_valid(mdp)
    stages = mdp.stages
    uniq = {id(st): st for st in stages}
    if quantize is None:
        pieces = [np.concatenate([st.decision_reward[mdp.admissible], st.reward])
                  for st in uniq.values()]
        unit = _unit_of(np.concatenate(pieces))
    else:
        if not quantize > 0:
            raise ValueError("quantization step must be positive")
        unit = float(quantize)
    cache, d_units, o_units = {}, [], []
    snap = 0.0
    for st in stages:
        if id(st) not in cache:
            d = np.rint(st.decision_reward / unit).astype(np.int64)
            o = np.rint(st.reward / unit).astype(np.int64)
            err_d = np.abs(st.decision_reward - unit * d)[mdp.admissible]
            err_o = np.abs(st.reward - unit * o)
            worst = float(max(err_d.max(initial=0.0), 0.0) + err_o.max(initial=0.0))
            if quantize is None and worst > RATIONAL_TOL * max(1.0, np.abs(st.reward).max(initial=0)):
                raise LatticeError("reward unit detection failed; enable quantization (Δy)")
            d.flags.writeable = False
            o.flags.writeable = False
            cache[id(st)] = (d, o, worst)
        d, o, worst = cache[id(st)]
        d_units.append(d)
        o_units.append(o)
        snap = max(snap, worst)
    grid = RewardGrid(unit, quantize is None, tuple(d_units), tuple(o_units),
                      0.0 if quantize is None else snap)
    mdp._cache[key] = grid
    return grid


@dataclass(frozen=True, eq=False)
class Box:
    """Superset of the reachable cells, stage by stage."""

    states: tuple  # per stage 0..T, sorted int64 state indices
    klo: np.ndarray  # (T + 1,) lowest reward index per stage
    khi: np.ndarray
    post_rows: tuple  # per stage 0..T-1, reachable post-decision states
    kzlo: np.ndarray  # (T,) reward-index range after the decision reward
    kzhi: np.ndarray
    roots: tuple = ()  # initial states the box was built for
    k_root: tuple = (0, 0)

    @property
    def horizon(self) -> int:
        return len(self.klo) - 1

    def width(self, t: int) -> int:
        return int(self.khi[t] - self.klo[t] + 1)

    def zwidth(self, t: int) -> int:
        return int(self.kzhi[t] - self.kzlo[t] + 1)

    @property
    def cells(self) -> int:
        return int(sum(len(self.states[t]) * self.width(t) for t in range(len(self.klo))))

    def same_shape(self, other: "Box") -> bool:
        return (np.array_equal(self.klo, other.klo) and np.array_equal(self.khi, other.khi)
                and all(np.array_equal(a, b) for a, b in zip(self.states, other.states)))


def make_box(mdp: TabularMdp, grid: RewardGrid, s0, k_root=(0, 0),
             cap: int = LATTICE_CAP) -> Box:
    """Box for roots ``s0`` (int or list) with stage-0 index range ``k_root``."""
    reach = mdp.reachable_states(s0)
    klo = [int(k_root[0])]
    khi = [int(k_root[1])]
    posts, kzlo, kzhi = [], [], []
    for t in range(mdp.horizon):
        stage = mdp.stages[t]
        du, ou = grid.stage_units(t)
        rows = reach[t]
        ok = mdp.admissible[rows]
        post = stage.post_state[rows][ok]
        dunits = du[rows][ok]
        pr = np.unique(post)
        posts.append(pr)
        zl = klo[t] + int(dunits.min())
        zh = khi[t] + int(dunits.max())
        kzlo.append(zl)
        kzhi.append(zh)
        lo_o, hi_o = np.inf, -np.inf
        for m in pr:
            seg = ou[stage.ptr[m] : stage.ptr[m + 1]]
            if len(seg):
                lo_o = min(lo_o, seg.min())
                hi_o = max(hi_o, seg.max())
        klo.append(zl + int(lo_o))
        khi.append(zh + int(hi_o))
    box = Box(tuple(reach), np.array(klo, np.int64), np.array(khi, np.int64),
              tuple(posts), np.array(kzlo, np.int64), np.array(kzhi, np.int64),
              tuple(int(x) for x in np.atleast_1d(s0)), (int(k_root[0]), int(k_root[1])))
    if box.cells > cap:
        raise LatticeError(
            f"augmented lattice needs {box.cells} cells (cap {cap}); "
            "enable quantization with a coarser Δy"
        )
    return box


@dataclass(frozen=True)
class YLattice:
    """Reachable pseudo-mean values per stage, with reachable states."""

    y0: float
    values: tuple  # per stage, sorted float arrays (rounded to 12 decimals)
    states: tuple  # per stage, sorted state indices with a reachable cell
    cells: tuple  # per stage, number of reachable (s, y) cells
    unit: float
    exact: bool

    @property
    def size(self) -> int:
        return int(sum(self.cells))


def reachable_masks(mdp: TabularMdp, grid: RewardGrid, box: Box, s0: int, k0: int = 0):
    """Boolean (S, width) masks of cells reachable under any admissible actions."""
    ptr, idx = mdp.action_csr
    masks = []
    cur = np.zeros((mdp.num_states, box.width(0)), dtype=bool)
    cur[s0, k0 - box.klo[0]] = True
    masks.append(cur)
    for t in range(mdp.horizon):
        stage = mdp.stages[t]
        du, ou = grid.stage_units(t)
        nxt = np.zeros((mdp.num_states, box.width(t + 1)), dtype=bool)
        _kernels.reach_all(cur, box.klo[t], box.states[t], ptr, idx, stage.post_state, du,
                           stage.ptr, stage.next_state, ou, box.klo[t + 1], nxt)
        masks.append(nxt)
        cur = nxt
    return masks


def reachable_lattice(mdp: TabularMdp, s0: int, y0: float, quantize: float | None = None,
                      cap: int = LATTICE_CAP) -> YLattice:
    """Forward closure of (s0, y0) under all actions and positive-probability outcomes."""
    grid = reward_grid(mdp, quantize)
    box = make_box(mdp, grid, s0, cap=cap)
    masks = reachable_masks(mdp, grid, box, s0)
    values, states, cells = [], [], []
    for t, mask in enumerate(masks):
        cols = np.flatnonzero(mask.any(axis=0))
        ks = box.klo[t] + cols
        values.append(np.unique(np.round(y0 - grid.unit * ks, Y_DECIMALS)))
        states.append(np.flatnonzero(mask.any(axis=1)))
        cells.append(int(mask.sum()))
    return YLattice(float(y0), tuple(values), tuple(states), tuple(cells), grid.unit, grid.exact)
