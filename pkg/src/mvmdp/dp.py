"""Backward induction for the inner pseudo mean-variance problem.

The augmented state is (s, y) with y_{t+1} = y_t - r_t and terminal reward
-λ y_T².  Values V_t(s, y) do not depend on the root, so one pass over a box
of reward indices serves every root contained in it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .lattice import Box, RewardGrid, make_box, reward_grid
from .mdp import TabularMdp
from .policies import ACTION_DTYPE, AugmentedPolicy

EPS_TIE = 1e-9


@dataclass(eq=False)
class AugmentedSolution:
    """Value and decision tables of one backward pass.

    ``values[t]`` (kept only if requested; the stage-0 table always is) and
    ``ties[t]`` share the layout of the policy tables.  ``ties`` counts the
    actions within ``eps_tie`` of the maximum (capped at 255).
    """

    mdp: TabularMdp
    grid: RewardGrid
    box: Box
    anchor: float
    s0: int
    values: list
    ties: list
    policy: AugmentedPolicy
    eps_tie: float

    @property
    def value(self) -> float:
        """V*_0(s0, y0) at the root."""
        return self.value_at_index(0, self.s0, 0)

    def value_at_index(self, t: int, s: int, k: int) -> float:
        table = self.values[t]
        if table is None:
            raise ValueError(f"stage {t} values were not kept")
        return float(table[s, k - self.box.klo[t]])

    def value_at(self, t: int, s: int, y: float) -> float:
        return self.value_at_index(t, s, self.policy.index_of(y))

    def q_values(self, t: int, s: int, k: int) -> dict[int, float]:
        """Action values Q_t(s, y, a) at cell (s, k) from the stored V_{t+1}."""
        nxt = self.values[t + 1]
        if nxt is None:
            raise ValueError(f"stage {t + 1} values were not kept")
        stage = self.mdp.stages[t]
        du, ou = self.grid.stage_units(t)
        out = {}
        for a in self.mdp.actions(s):
            m = stage.post_state[s, a]
            lo, hi = stage.ptr[m], stage.ptr[m + 1]
            cols = k + du[s, a] + ou[lo:hi] - self.box.klo[t + 1]
            cont = nxt[stage.next_state[lo:hi], cols]
            out[int(a)] = float(stage.decision_reward[s, a]
                                + np.sum(stage.prob[lo:hi] * (stage.reward[lo:hi] + cont)))
        return out

    def tied_actions(self, t: int, s: int, k: int) -> list[int]:
        q = self.q_values(t, s, k)
        best = max(q.values())
        return [a for a, v in q.items() if v >= best - self.eps_tie]

    def lattice_stats(self) -> dict:
        return {
            "unit": self.grid.unit,
            "exact": self.grid.exact,
            "max_snap": self.grid.max_snap,
            "box_cells": self.box.cells,
            "stage_widths": [self.box.width(t) for t in range(self.box.horizon + 1)],
        }


def _align(table, src_klo, dst_klo, width):
    """Re-index a stage table onto another column range (missing -> -1)."""
    out = np.full((table.shape[0], width), -1, dtype=ACTION_DTYPE)
    shift = int(dst_klo - src_klo)
    lo = max(0, -shift)
    hi = min(width, table.shape[1] - shift)
    if hi > lo:
        out[:, lo:hi] = table[:, lo + shift : hi + shift]
    return out


def solve_box(mdp: TabularMdp, grid: RewardGrid, box: Box, anchor: float, *,
              incumbent: AugmentedPolicy | None = None, eps_tie: float = EPS_TIE,
              keep_values: bool = True):
    """Run backward induction on ``box``; returns (values, tables, ties).

    Cell (s, k) of stage t stands for pseudo mean anchor - unit * k.
    """
    if mdp.num_actions >= np.iinfo(ACTION_DTYPE).max:
        raise ValueError("too many actions for the policy table dtype")
    T = mdp.horizon
    lam = mdp.risk_aversion
    act_ptr, act_idx = mdp.action_csr
    values = [None] * (T + 1)
    tables = [None] * T
    ties = [None] * T

    ys = anchor - grid.unit * (box.klo[T] + np.arange(box.width(T)))
    v_next = np.full((mdp.num_states, box.width(T)), np.nan)
    v_next[box.states[T]] = -lam * ys * ys
    values[T] = v_next
    for t in range(T - 1, -1, -1):
        stage = mdp.stages[t]
        du, ou = grid.stage_units(t)
        w = np.empty((stage.num_post_states, box.zwidth(t)))
        _kernels.post_values(v_next, box.klo[t + 1], box.post_rows[t], box.kzlo[t], stage.ptr,
                             stage.next_state, stage.prob, stage.reward, ou, w)
        width = box.width(t)
        v = np.full((mdp.num_states, width), np.nan)
        a = np.full((mdp.num_states, width), -1, dtype=ACTION_DTYPE)
        nt = np.zeros((mdp.num_states, width), dtype=np.uint8)
        if incumbent is not None:
            inc = _align(incumbent.tables[t], incumbent.box.klo[t], box.klo[t], width)
        else:
            inc = a
        _kernels.bellman_max(w, box.kzlo[t], box.states[t], box.klo[t], act_ptr, act_idx,
                             stage.post_state, stage.decision_reward, du, inc,
                             incumbent is not None, eps_tie, v, a, nt)
        del w
        tables[t] = a
        ties[t] = nt
        values[t] = v
        if not keep_values:
            values[t + 1] = None
        v_next = v
    return values, tables, ties


def backward_induction(mdp: TabularMdp, s0: int, y0: float, *, quantize: float | None = None,
                       incumbent: AugmentedPolicy | None = None, eps_tie: float = EPS_TIE,
                       keep_values: bool = True) -> AugmentedSolution:
    """Optimal inner policy at root (s0, y0) and its value tables.

    ``incumbent`` (a policy on the same root state) is kept wherever its
    action is tied with the best one.  Reward indices are relative to the
    root, so incumbents from other pseudo means compare history by history.
    """
    grid = reward_grid(mdp, quantize)
    box = cached_box(mdp, grid, s0)
    values, tables, ties = solve_box(mdp, grid, box, float(y0), incumbent=incumbent,
                                     eps_tie=eps_tie, keep_values=keep_values)
    policy = AugmentedPolicy(grid, box, float(y0), tuple(tables))
    return AugmentedSolution(mdp, grid, box, float(y0), int(s0), values, ties, policy, eps_tie)


def quantized_backward_induction(mdp: TabularMdp, s0: int, y0: float, dy: float,
                                 **kwargs) -> AugmentedSolution:
    """Backward induction with rewards snapped to multiples of ``dy`` for indexing.

    ``solution.grid.max_snap`` reports the worst per-step snap distance.
    """
    return backward_induction(mdp, s0, y0, quantize=dy, **kwargs)


def cached_box(mdp: TabularMdp, grid: RewardGrid, s0, k_root=(0, 0)) -> Box:
    key = ("box", id(grid), tuple(np.atleast_1d(s0).tolist()), tuple(k_root))
    box = mdp._cache.get(key)
    if box is None:
        box = mdp._cache[key] = make_box(mdp, grid, s0, k_root)
    return box
