"""Exact and Monte-Carlo evaluation of mean, variance and (pseudo) mean-variance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .dp import cached_box
from .lattice import Box, RewardGrid
from .mdp import TabularMdp, ensure_valid
from .policies import AugmentedPolicy, MixedPolicy, PolicyUndefinedError, resolve

SIM_BLOCK = 4096


@dataclass(frozen=True)
class EvalResult:
    mean: float
    variance: float
    second_moment: float
    mv: float
    pseudo_mv: float
    y0: float
    lam: float

    @classmethod
    def from_moments(cls, mean: float, second: float, lam: float, y0: float) -> "EvalResult":
        var = max(second - mean * mean, 0.0)
        return cls(mean, var, second, mean - lam * var,
                   mean - lam * (var + (mean - y0) ** 2), y0, lam)

    def pseudo_mv_at(self, y: float) -> float:
        """Ĵ(y) = E[R] - λ E[(R - y)²] for any pseudo mean y."""
        return self.mean - self.lam * (self.second_moment - 2 * y * self.mean + y * y)

    def as_dict(self) -> dict:
        return {"mean": self.mean, "variance": self.variance,
                "second_moment": self.second_moment, "mv": self.mv,
                "pseudo_mv": self.pseudo_mv, "y0": self.y0, "lambda": self.lam}


@dataclass(frozen=True)
class TerminalDistribution:
    """Mass over terminal cells (s_T, y_T) plus exact reward moments.

    In quantized mode y_T is the snapped cell value; ``mean_reward`` and
    ``second_moment`` always come from the exact rewards.
    """

    s0: int
    y0: float
    states: np.ndarray
    y: np.ndarray
    mass: np.ndarray
    mean_reward: float
    second_moment: float

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    def items(self):
        return zip(self.states.tolist(), self.y.tolist(), self.mass.tolist())


@dataclass
class ForwardPass:
    """Per-stage cell masses and mass-weighted reward moments."""

    box: Box
    grid: RewardGrid
    mass: list
    m1: list
    m2: list

    def moments(self) -> tuple[float, float]:
        return float(self.m1[-1].sum()), float(self.m2[-1].sum())


def forward_pass(mdp: TabularMdp, grid: RewardGrid, s0: int, first, second=None,
                 weight: float = 0.0) -> ForwardPass:
    """Push the point mass at (s0, root) through T stages.

    ``first``/``second`` are (AugmentedPolicy, root index) pairs; the decision
    rule at every cell is the ``weight`` blend of the two (``weight`` may be
    any real; outside [0, 1] the masses are signed).
    """
    ensure_valid(mdp)
    box = cached_box(mdp, grid, s0)
    pol_a, d_a = first
    pol_b, d_b = second if second is not None else first
    _check_grid(pol_a, grid)
    _check_grid(pol_b, grid)
    mass = np.zeros((mdp.num_states, 1))
    mass[s0, 0] = 1.0
    m1 = np.zeros_like(mass)
    m2 = np.zeros_like(mass)
    out = ForwardPass(box, grid, [mass], [m1], [m2])
    for t in range(mdp.horizon):
        stage = mdp.stages[t]
        du, ou = grid.stage_units(t)
        width = box.width(t + 1)
        nm = np.zeros((mdp.num_states, width))
        n1 = np.zeros_like(nm)
        n2 = np.zeros_like(nm)
        off_a = d_a + int(box.klo[t] - pol_a.box.klo[t])
        off_b = d_b + int(box.klo[t] - pol_b.box.klo[t])
        es, ek = _kernels.forward_step(
            mass, m1, m2, box.klo[t], box.states[t], pol_a.tables[t], off_a, pol_b.tables[t],
            off_b, float(weight), stage.post_state, stage.decision_reward, du, stage.ptr,
            stage.next_state, stage.prob, stage.reward, ou, box.klo[t + 1], nm, n1, n2)
        if es >= 0:
            bad = pol_a if weight != 1.0 else pol_b
            raise PolicyUndefinedError(t, int(es), bad.anchor - grid.unit * (ek + d_a))
        mass, m1, m2 = nm, n1, n2
        out.mass.append(mass)
        out.m1.append(m1)
        out.m2.append(m2)
    return out


def _check_grid(policy: AugmentedPolicy, grid: RewardGrid):
    if policy.grid is not grid and not (policy.grid.unit == grid.unit
                                        and policy.grid.exact == grid.exact):
        raise ValueError("policy was built on a different reward grid")


def forward_distribution(mdp: TabularMdp, policy, s0: int, y0: float | None = None
                         ) -> TerminalDistribution:
    """Exact terminal distribution of (s_T, y_T) from root (s0, y0)."""
    pol, d, root = resolve(policy, y0)
    fp = forward_pass(mdp, pol.grid, s0, (pol, d))
    mass = fp.mass[-1]
    s, c = np.nonzero(mass)
    ys = root - pol.grid.unit * (fp.box.klo[-1] + c)
    m1, m2 = fp.moments()
    return TerminalDistribution(int(s0), root, s, ys, mass[s, c], m1, m2)


def evaluate(mdp: TabularMdp, policy, s0: int, y0: float | None = None) -> EvalResult:
    """Mean, variance, J and Ĵ(y0) of a policy from s0.

    For an AugmentedPolicy, ``y0`` is the root of the history view (default:
    the policy's own anchor).  For a HistoryPolicyView the root is fixed and
    ``y0`` only selects where Ĵ is reported.
    """
    pol, d, root = resolve(policy, None if _is_view(policy) else y0)
    fp = forward_pass(mdp, pol.grid, s0, (pol, d))
    m1, m2 = fp.moments()
    return EvalResult.from_moments(m1, m2, mdp.risk_aversion, root if y0 is None else float(y0))


def _is_view(policy) -> bool:
    return not isinstance(policy, AugmentedPolicy)


def evaluate_kernel_mix(mdp: TabularMdp, first, second, delta: float, s0: int,
                        y0: float | None = None) -> EvalResult:
    """Per-stage decision-rule mixture with weight ``delta`` on ``second``.

    ``delta`` may lie outside [0, 1] (signed masses), which finite-difference
    checks use.
    """
    pa, da, root = resolve(first)
    pb, db, _ = resolve(second)
    fp = forward_pass(mdp, pa.grid, s0, (pa, da), (pb, db), delta)
    m1, m2 = fp.moments()
    return EvalResult.from_moments(m1, m2, mdp.risk_aversion, root if y0 is None else float(y0))


def evaluate_mixed(mdp: TabularMdp, mix: MixedPolicy, s0: int, y0: float | None = None
                   ) -> EvalResult:
    """Evaluate a MixedPolicy; Ĵ is reported at ``y0`` (default: first root)."""
    root = resolve(mix.first)[2]
    y = root if y0 is None else float(y0)
    if mix.mode == "kernel":
        return evaluate_kernel_mix(mdp, mix.first, mix.second, mix.delta, s0, y)
    a = evaluate(mdp, mix.first, s0)
    if mix.delta == 0.0:
        return EvalResult.from_moments(a.mean, a.second_moment, a.lam, y)
    b = evaluate(mdp, mix.second, s0)
    if mix.delta == 1.0:
        return EvalResult.from_moments(b.mean, b.second_moment, b.lam, y)
    w = mix.delta
    mean = (1 - w) * a.mean + w * b.mean
    second = (1 - w) * a.second_moment + w * b.second_moment
    return EvalResult.from_moments(mean, second, mdp.risk_aversion, y)


# -- Monte Carlo -------------------------------------------------------------


@dataclass(frozen=True)
class SimulationResult:
    n_paths: int
    mean: float
    variance: float
    mean_se: float
    variance_se: float

    @property
    def mean_ci95(self) -> float:
        return 1.959963984540054 * self.mean_se

    @property
    def variance_ci95(self) -> float:
        return 1.959963984540054 * self.variance_se

    def as_dict(self) -> dict:
        return {"n_paths": self.n_paths, "mean": self.mean, "variance": self.variance,
                "mean_se": self.mean_se, "variance_se": self.variance_se,
                "mean_ci95": self.mean_ci95, "variance_ci95": self.variance_ci95}


def sample_summary(samples: np.ndarray) -> SimulationResult:
    n = len(samples)
    mean = float(samples.mean())
    dev = samples - mean
    var = float(dev @ dev / (n - 1))
    m4 = float(np.mean(dev**4))
    var_se = float(np.sqrt(max(m4 - var * var, 0.0) / n))
    return SimulationResult(n, mean, var, float(np.sqrt(var / n)), var_se)


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Counter-based stream for one block of paths, independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _cumulative(mdp: TabularMdp, t: int) -> np.ndarray:
    stage = mdp.stages[t]
    key = ("cum", id(stage))
    cum = mdp._cache.get(key)
    if cum is None:
        rows = np.repeat(np.arange(stage.num_post_states), np.diff(stage.ptr))
        within = np.cumsum(stage.prob) - np.repeat(
            np.concatenate([[0.0], np.cumsum(stage.prob)])[stage.ptr[:-1]], np.diff(stage.ptr))
        cum = mdp._cache[key] = rows + within
    return cum


def simulate_rewards(mdp: TabularMdp, policy, s0: int, n_paths: int, seed: int = 0,
                     y0: float | None = None) -> np.ndarray:
    """Total reward of ``n_paths`` simulated trajectories, in path order."""
    ensure_valid(mdp)
    pol, d, _ = resolve(policy, y0)
    grid = pol.grid
    out = np.empty(n_paths)
    for b, start in enumerate(range(0, n_paths, SIM_BLOCK)):
        n = min(SIM_BLOCK, n_paths - start)
        u = block_rng(seed, b).random((n, mdp.horizon))
        s = np.full(n, s0, dtype=np.int64)
        k = np.full(n, d, dtype=np.int64)
        total = np.zeros(n)
        for t in range(mdp.horizon):
            stage = mdp.stages[t]
            du, ou = grid.stage_units(t)
            tab = pol.tables[t]
            col = k - pol.box.klo[t]
            inside = (col >= 0) & (col < tab.shape[1])
            a = np.where(inside, tab[s, np.clip(col, 0, tab.shape[1] - 1)], -1).astype(np.int64)
            if np.any(a < 0):
                i = int(np.flatnonzero(a < 0)[0])
                raise PolicyUndefinedError(t, int(s[i]), pol.anchor - grid.unit * int(k[i]))
            m = stage.post_state[s, a]
            o = np.searchsorted(_cumulative(mdp, t), m + u[:, t], side="right")
            o = np.clip(o, stage.ptr[m], stage.ptr[m + 1] - 1)
            total += stage.decision_reward[s, a] + stage.reward[o]
            k += du[s, a] + ou[o]
            s = stage.next_state[o]
        out[start : start + n] = total
    return out


def simulate(mdp: TabularMdp, policy, s0: int, y0: float | None = None, n_paths: int = 100_000,
             seed: int = 0) -> SimulationResult:
    """Sample mean/variance of the total reward with standard errors."""
    if n_paths < 2:
        raise ValueError("need at least two paths")
    return sample_summary(simulate_rewards(mdp, policy, s0, n_paths, seed, y0))


def policy_moments(mdp: TabularMdp, policy: AugmentedPolicy, d: int, s0: int):
    """Backward conditional moments (f1, f2) of future reward on the s0 box.

    ``f1[t][s, c]`` is E[sum_{τ>=t} r_τ | cell], cells indexed like the
    forward pass (reward index relative to the root).
    """
    grid = policy.grid
    box = cached_box(mdp, grid, s0)
    T = mdp.horizon
    f1 = [None] * (T + 1)
    f2 = [None] * (T + 1)
    f1[T] = np.zeros((mdp.num_states, box.width(T)))
    f2[T] = np.zeros_like(f1[T])
    for t in range(T - 1, -1, -1):
        stage = mdp.stages[t]
        du, ou = grid.stage_units(t)
        g1 = np.full((mdp.num_states, box.width(t)), np.nan)
        g2 = np.full_like(g1, np.nan)
        off = d + int(box.klo[t] - policy.box.klo[t])
        _kernels.moments_step(f1[t + 1], f2[t + 1], box.klo[t + 1], box.states[t], box.klo[t],
                              policy.tables[t], off, stage.post_state, stage.decision_reward,
                              du, stage.ptr, stage.next_state, stage.prob, stage.reward, ou,
                              g1, g2)
        f1[t], f2[t] = g1, g2
    return box, f1, f2


def policy_reach(mdp: TabularMdp, policy: AugmentedPolicy, s0: int, k_root: int = 0):
    """Masks of cells reached under ``policy`` from (s0, k_root), in its own box layout."""
    box, grid = policy.box, policy.grid
    mass = np.zeros((mdp.num_states, box.width(0)))
    mass[s0, k_root - box.klo[0]] = 1.0
    masks = [mass != 0]
    scratch = np.zeros_like(mass)
    for t in range(mdp.horizon):
        stage = mdp.stages[t]
        du, ou = grid.stage_units(t)
        nm = np.zeros((mdp.num_states, box.width(t + 1)))
        n1 = np.zeros_like(nm)
        es, ek = _kernels.forward_step(
            mass, scratch, scratch, box.klo[t], box.states[t], policy.tables[t], 0,
            policy.tables[t], 0, 0.0, stage.post_state, stage.decision_reward, du, stage.ptr,
            stage.next_state, stage.prob, stage.reward, ou, box.klo[t + 1], nm, n1, n1)
        if es >= 0:
            raise PolicyUndefinedError(t, int(es), policy.anchor - grid.unit * ek)
        mass = nm
        scratch = np.zeros_like(nm)
        masks.append(mass != 0)
    return masks
