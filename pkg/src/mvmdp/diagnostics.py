"""Sensitivity identities on the augmented chain induced by deterministic policies.

A chain lists, per stage, the cells (s, k) reached from the root, with the
one-step expected reward r̃_t, the sparse transition matrix P̃_t to the next
stage and the value-to-go g̃_t (terminal g̃_T = -λ y²).  Two chains built
together share one cell universe, the cells reachable when either decision
rule may be used at every cell, so their matrices are conformable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .dp import EPS_TIE
from .evaluation import evaluate_kernel_mix
from .lattice import RewardGrid
from .mdp import TabularMdp, ensure_valid
from .policies import AugmentedPolicy, PolicyUndefinedError, resolve

FD_STEPS = (1e-4, 1e-5)


@dataclass(eq=False)
class StagewiseChain:
    s0: int
    y0: float
    lam: float
    grid: RewardGrid
    states: list  # per stage 0..T, state of each cell
    ks: list  # per stage 0..T, reward index of each cell (relative to the root)
    ys: list  # per stage 0..T, pseudo mean of each cell
    actions: list  # per stage 0..T-1
    rewards: list  # r̃_t per stage 0..T (r̃_T = -λ y²)
    transitions: list  # P̃_t, csr (n_t, n_{t+1})
    values: list = field(default_factory=list)  # g̃_t
    to_go: list = field(default_factory=list)  # expected reward to go (no terminal term)

    @property
    def horizon(self) -> int:
        return len(self.transitions)

    @property
    def pseudo_mv(self) -> float:
        """Ĵ(y0) at the root."""
        return float(self.values[0][0])

    @property
    def mean(self) -> float:
        return float(self.to_go[0][0])

    @property
    def mv(self) -> float:
        return self.pseudo_mv + self.lam * (self.mean - self.y0) ** 2

    def recursion_residual(self) -> float:
        """max |g̃_t - (r̃_t + P̃_t g̃_{t+1})| over all stages."""
        worst = float(np.max(np.abs(self.values[-1] - self.rewards[-1]), initial=0.0))
        for t in range(self.horizon):
            res = self.values[t] - (self.rewards[t] + self.transitions[t] @ self.values[t + 1])
            worst = max(worst, float(np.max(np.abs(res), initial=0.0)))
        return worst

    def distributions(self) -> list:
        """e Π_{τ<t} P̃_τ for t = 0..T."""
        pi = np.zeros(len(self.states[0]))
        pi[0] = 1.0
        out = [pi]
        for P in self.transitions:
            pi = P.T @ pi
            out.append(pi)
        return out


def _universe(mdp, grid, s0, tables, full=False):
    """Cells per stage reachable when any of the given decision rules may act.

    With ``full`` every admissible action may act.
    """
    cells = [(np.array([s0]), np.array([0]))]
    for t in range(mdp.horizon):
        s, k = cells[-1]
        parts_s, parts_k = [], []
        if full:
            rows, acts = np.nonzero(mdp.admissible[s])
            choices = [(s[rows], k[rows], acts)]
        else:
            choices = [(s, k, _actions(pol, d, t, s, k)) for pol, d in tables]
        for cs, ck, a in choices:
            ns, nk, _, _, _ = _outcomes(mdp, grid, t, cs, ck, a)
            parts_s.append(ns)
            parts_k.append(nk)
        cells.append(_unique_cells(np.concatenate(parts_s), np.concatenate(parts_k)))
    return cells


def _unique_cells(s, k):
    pairs = np.unique(np.stack([s, k], axis=1), axis=0)
    return pairs[:, 0].copy(), pairs[:, 1].copy()


def _actions(pol: AugmentedPolicy, d: int, t: int, s, k):
    tab = pol.tables[t]
    col = k + d - pol.box.klo[t]
    inside = (col >= 0) & (col < tab.shape[1])
    a = np.where(inside, tab[s, np.clip(col, 0, tab.shape[1] - 1)], -1).astype(np.int64)
    if np.any(a < 0):
        i = int(np.flatnonzero(a < 0)[0])
        raise PolicyUndefinedError(t, int(s[i]), pol.anchor - pol.grid.unit * int(k[i] + d))
    return a


def _outcomes(mdp, grid, t, s, k, a):
    """Per-outcome (next state, next index, probability, source row, outcome) for cells acting a."""
    stage = mdp.stages[t]
    du, ou = grid.stage_units(t)
    m = stage.post_state[s, a]
    lo, hi = stage.ptr[m], stage.ptr[m + 1]
    counts = hi - lo
    row = np.repeat(np.arange(len(s)), counts)
    o = np.repeat(lo - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts) + np.arange(counts.sum())
    nk = k[row] + du[s[row], a[row]] + ou[o]
    return stage.next_state[o], nk, stage.prob[o], row, o


def _lookup(us, uk, s, k):
    """Positions of cells (s, k) among sorted cells (us, uk), and whether present."""
    base = min(uk.min(), k.min())
    width = int(max(uk.max(), k.max()) - base + 1)
    ukey = us.astype(np.int64) * width + (uk - base)
    key = s.astype(np.int64) * width + (k - base)
    pos = np.searchsorted(ukey, key)
    found = pos < len(ukey)
    found[found] = ukey[pos[found]] == key[found]
    return pos, found


def _chain(mdp, grid, s0, y0, pol, d, cells):
    lam = mdp.risk_aversion
    T = mdp.horizon
    states = [c[0] for c in cells]
    ks = [c[1] for c in cells]
    ys = [y0 - grid.unit * k for k in ks]
    actions, rewards, trans = [], [], []
    for t in range(T):
        stage = mdp.stages[t]
        s, k = cells[t]
        a = _actions(pol, d, t, s, k)
        ns, nk, p, row, _ = _outcomes(mdp, grid, t, s, k, a)
        col, found = _lookup(*cells[t + 1], ns, nk)
        if not found.all():
            raise ValueError("cell universe is not closed under the policy")
        P = sparse.csr_matrix((p, (row, col)), shape=(len(s), len(states[t + 1])))
        actions.append(a)
        rewards.append(stage.expected_reward()[s, a])
        trans.append(P)
    rewards.append(-lam * ys[T] ** 2)
    chain = StagewiseChain(int(s0), float(y0), lam, grid, states, ks, ys, actions, rewards, trans)
    g = rewards[T]
    h = np.zeros(len(states[T]))
    chain.values = [None] * T + [g]
    chain.to_go = [None] * T + [h]
    for t in range(T - 1, -1, -1):
        g = rewards[t] + trans[t] @ g
        h = rewards[t] + trans[t] @ h
        chain.values[t] = g
        chain.to_go[t] = h
    return chain


def _ordered(cells):
    out = []
    for s, k in cells:
        order = np.lexsort((k, s))
        out.append((s[order], k[order]))
    return out


def build_chain(mdp: TabularMdp, policy, s0: int, y0: float | None = None, *,
                full: bool = False) -> StagewiseChain:
    """Chain of one policy rooted at (s0, y0).

    The cells are those the policy reaches, or with ``full`` every cell
    reachable under some choice of actions (needed by the optimality scan).
    """
    return build_chains(mdp, policy, None, s0, y0, full=full)[0]


def build_chains(mdp: TabularMdp, first, second, s0: int, y0: float | None = None, *,
                 full: bool = False):
    """Chains of two policies on their common cell universe.

    The policies are read as history policies from their roots (an
    AugmentedPolicy's root is its anchor); ``y0`` is the pseudo mean of the
    terminal reward, default the mean reward of ``first``.
    """
    ensure_valid(mdp)
    pa, da, _ = resolve(first)
    rules = [(pa, da)]
    if second is not None:
        pb, db, _ = resolve(second)
        if pb.grid.unit != pa.grid.unit or pb.grid.exact != pa.grid.exact:
            raise ValueError("policies were built on different reward grids")
        rules.append((pb, db))
    grid = pa.grid
    cells = _ordered(_universe(mdp, grid, int(s0), rules, full))
    if y0 is None:
        y0 = _chain(mdp, grid, s0, 0.0, pa, da, cells).mean
    return [_chain(mdp, grid, s0, float(y0), p, d, cells) for p, d in rules]


def _check_pair(a: StagewiseChain, b: StagewiseChain):
    if a.horizon != b.horizon or a.s0 != b.s0 or a.y0 != b.y0 or any(
            len(x) != len(y) for x, y in zip(a.states, b.states)):
        raise ValueError("chains are not built on a common universe")


def _stage_terms(base: StagewiseChain, other: StagewiseChain, weights, values):
    total = 0.0
    for t in range(base.horizon):
        diff = other.rewards[t] - base.rewards[t]
        diff = diff + (other.transitions[t] - base.transitions[t]) @ values[t + 1]
        total += float(weights[t] @ diff)
    return total


def performance_difference(chain_u: StagewiseChain, chain_v: StagewiseChain) -> float:
    """J(v) - J(u) by the difference formula weighted with v's distributions.

    With y0 equal to the mean of u the correction term is λ (μ_v - μ_u)².
    """
    _check_pair(chain_u, chain_v)
    d_pseudo = _stage_terms(chain_u, chain_v, chain_v.distributions(), chain_u.values)
    lam, y = chain_u.lam, chain_u.y0
    return d_pseudo + lam * (chain_v.mean - y) ** 2 - lam * (chain_u.mean - y) ** 2


def performance_derivative(chain_u: StagewiseChain, chain_v: StagewiseChain) -> float:
    """dJ/dδ at δ = 0 for the per-stage decision-rule mixture (1-δ) u + δ v.

    With y0 equal to the mean of u the mean-shift term vanishes.
    """
    _check_pair(chain_u, chain_v)
    pis = chain_u.distributions()
    d_pseudo = _stage_terms(chain_u, chain_v, pis, chain_u.values)
    d_mean = _stage_terms(chain_u, chain_v, pis, chain_u.to_go)
    return d_pseudo + 2 * chain_u.lam * (chain_u.mean - chain_u.y0) * d_mean


@dataclass(frozen=True)
class FiniteDifference:
    steps: tuple
    centered: tuple
    extrapolated: float


def finite_difference(mdp: TabularMdp, first, second, s0: int, steps=FD_STEPS
                      ) -> FiniteDifference:
    """Centered differences of J along the kernel-level mixture, plus Richardson."""
    def mv(delta):
        # unclamped: signed mixtures can have m2 < m1², and J must stay polynomial in δ
        ev = evaluate_kernel_mix(mdp, first, second, delta, s0)
        return ev.mean - mdp.risk_aversion * (ev.second_moment - ev.mean**2)

    cent = []
    for h in steps:
        cent.append((mv(h) - mv(-h)) / (2 * h))
    if len(steps) >= 2:
        r = (steps[0] / steps[1]) ** 2
        extra = (r * cent[1] - cent[0]) / (r - 1)
    else:
        extra = cent[0]
    return FiniteDifference(tuple(steps), tuple(cent), extra)


@dataclass(frozen=True)
class Violation:
    t: int
    s: int
    y: float
    action: int
    better_action: int
    gain: float


def optimality_condition_check(mdp: TabularMdp, chain: StagewiseChain, eps_tie: float = EPS_TIE
                               ) -> list[Violation]:
    """Cells where some action beats the chain's action against g̃ by more than ``eps_tie``.

    Actions leading outside the chain's cells before the last stage cannot be
    scored and are skipped, so a complete scan needs a chain built with
    ``full=True``.
    """
    grid = chain.grid
    out = []
    for t in range(chain.horizon):
        s, k = chain.states[t], chain.ks[t]
        chosen = chain.rewards[t] + chain.transitions[t] @ chain.values[t + 1]
        best = chosen.copy()
        best_a = np.full(len(s), -1)
        for a in range(mdp.num_actions):
            rows = np.flatnonzero(mdp.admissible[s, a] & (chain.actions[t] != a))
            if len(rows) == 0:
                continue
            acts = np.full(len(rows), a)
            ns, nk, p, row, o = _outcomes(mdp, grid, t, s[rows], k[rows], acts)
            if t + 1 == chain.horizon:
                cont = -chain.lam * (chain.y0 - grid.unit * nk) ** 2
                known = np.ones(len(rows), dtype=bool)
            else:
                pos, found = _lookup(chain.states[t + 1], chain.ks[t + 1], ns, nk)
                cont = np.where(found, chain.values[t + 1][np.minimum(pos, len(chain.ks[t + 1]) - 1)], 0.0)
                known = np.bincount(row, weights=~found, minlength=len(rows)) == 0
            stage = mdp.stages[t]
            q = stage.decision_reward[s[rows], a] + np.bincount(
                row, weights=p * (stage.reward[o] + cont), minlength=len(rows))
            better = known & (q > best[rows] + eps_tie) & (q > best[rows])
            best[rows[better]] = q[better]
            best_a[rows[better]] = a
        for i in np.flatnonzero(best_a >= 0):
            out.append(Violation(t, int(s[i]), float(chain.ys[t][i]), int(chain.actions[t][i]),
                                 int(best_a[i]), float(best[i] - chosen[i])))
    return out
