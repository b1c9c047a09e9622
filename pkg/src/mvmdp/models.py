"""Generators for the queueing, inventory and random benchmark models."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .mdp import ModelError, Stage, TabularMdp

MAX_GRID_STATES = 100_000
RANDOM_SIZE_CAP = 10_000


@dataclass(frozen=True)
class QueueingParams:
    horizon: int = 4
    capacity: float = 10.0
    max_service: float = 1.0
    max_arrival: float = 1.0
    arrival_prob: float = 0.5
    operating_cost: float = 2.0
    holding_cost: float = 1.0
    risk_aversion: float = 2.0
    fineness: float = 0.01

    def grid_size(self, value: float) -> int:
        n = value / self.fineness
        if self.fineness <= 0 or abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
            raise ModelError(f"{value} is not a positive multiple of the fineness {self.fineness}")
        return int(round(n))


@dataclass(frozen=True)
class InventoryParams:
    horizon: int = 10
    capacity: int = 10
    price: int = 4
    order_cost: int = 2
    holding_cost: int = 1
    shortage_cost: int = 3
    risk_aversion: float = 2.0


def build_queueing(params: QueueingParams = QueueingParams()) -> TabularMdp:
    """Single-server workload queue with controllable service rate.

    Workload s, service a and arrivals are all on the grid of step Δ.  The
    next workload is min([s - a]^+ + ξ, S) and the reward -(c_o a + c_h s').
    The arrival atom at 0 has mass 1 - q and each positive atom q Δ / X.
    """
    p = params
    if not 0 < p.arrival_prob < 1:
        raise ModelError("arrival probability must lie in (0, 1)")
    n_cap = p.grid_size(p.capacity)
    n_act = p.grid_size(p.max_service)
    n_arr = p.grid_size(p.max_arrival)
    if n_cap + 1 > MAX_GRID_STATES:
        raise ModelError(f"{n_cap + 1} grid states exceed the limit of {MAX_GRID_STATES}")
    num_states, num_actions = n_cap + 1, n_act + 1
    step = p.fineness

    s_idx = np.arange(num_states)[:, None]
    a_idx = np.arange(num_actions)[None, :]
    post = np.maximum(s_idx - a_idx, 0).astype(np.int64)
    decision = np.broadcast_to(-p.operating_cost * step * a_idx, post.shape).copy()

    xi = np.arange(n_arr + 1)
    xi_prob = np.full(n_arr + 1, p.arrival_prob / n_arr)
    xi_prob[0] = 1.0 - p.arrival_prob
    nxt = np.minimum(np.arange(num_states)[:, None] + xi[None, :], n_cap)
    reward = -p.holding_cost * step * nxt
    ptr = np.arange(num_states + 1) * (n_arr + 1)
    stage = Stage(post, decision, ptr, nxt.ravel(), np.tile(xi_prob, num_states), reward.ravel())

    meta = {"name": "queueing", "params": asdict(p), "state_step": step,
            "linear_convex": True}
    admissible = np.ones((num_states, num_actions), dtype=bool)
    return TabularMdp(p.horizon, num_states, num_actions, admissible,
                      (stage,) * p.horizon, p.risk_aversion, meta)


def build_inventory(params: InventoryParams = InventoryParams()) -> TabularMdp:
    """Inventory with planned shortages and uniform demand on {0..S}.

    Ordering a at stock s gives post-order stock m = s + a <= S; demand ξ
    yields s' = [m - ξ]^+ and reward p_r ξ - c_o a - c_h [m - ξ]^+ - c_s [ξ - m]^+.
    """
    p = params
    if not (p.shortage_cost > p.order_cost and p.price > p.order_cost):
        raise ModelError("inventory parameters need c_s > c_o and p_r > c_o")
    size = p.capacity + 1
    s_idx = np.arange(size)[:, None]
    a_idx = np.arange(size)[None, :]
    admissible = s_idx + a_idx <= p.capacity
    post = np.where(admissible, s_idx + a_idx, -1).astype(np.int64)
    decision = np.where(admissible, -float(p.order_cost) * a_idx, 0.0)

    m = np.arange(size)[:, None]
    demand = np.arange(size)[None, :]
    left = np.maximum(m - demand, 0)
    short = np.maximum(demand - m, 0)
    reward = (p.price * demand - p.holding_cost * left - p.shortage_cost * short).astype(float)
    ptr = np.arange(size + 1) * size
    stage = Stage(post, decision, ptr, left.ravel(), np.full(size * size, 1.0 / size),
                  reward.ravel())

    meta = {"name": "inventory", "params": asdict(p), "linear_convex": False}
    return TabularMdp(p.horizon, size, size, admissible, (stage,) * p.horizon,
                      p.risk_aversion, meta)


def build_random(seed: int, sizes: tuple[int, int, int], *, reward_grid=(0.0, 0.5, 1.0),
                 risk_aversion: float = 1.0, outcome_rewards: bool = False,
                 sparsity: float = 0.3) -> TabularMdp:
    """Reproducible random instance with ``sizes = (|S|, |A|, T)``.

    Rewards are drawn from ``reward_grid``.  With ``outcome_rewards`` every
    transition carries its own reward (noise-driven form); otherwise the
    reward depends on (s, a) only.  Each admissible set and kernel row is
    nonempty; kernel entries are zeroed with probability ``sparsity``.
    """
    num_states, num_actions, horizon = (int(x) for x in sizes)
    if min(num_states, num_actions, horizon) < 1:
        raise ModelError("sizes must be positive")
    if num_states * num_actions * horizon > RANDOM_SIZE_CAP:
        raise ModelError(f"|S||A|T exceeds the random-instance cap {RANDOM_SIZE_CAP}")
    rng = np.random.default_rng(seed)
    grid = np.asarray(reward_grid, dtype=float)

    admissible = rng.random((num_states, num_actions)) < 0.8
    admissible[np.arange(num_states), rng.integers(num_actions, size=num_states)] = True

    stages = []
    for _ in range(horizon):
        kernel = rng.random((num_states, num_actions, num_states))
        kernel[rng.random(kernel.shape) < sparsity] = 0.0
        empty = kernel.sum(axis=2) == 0
        fill = rng.integers(num_states, size=empty.shape)
        kernel[empty, fill[empty]] = 1.0
        kernel /= kernel.sum(axis=2, keepdims=True)
        if outcome_rewards:
            rewards = grid[rng.integers(len(grid), size=kernel.shape)]
            stages.append(_outcome_stage(kernel, rewards, admissible))
        else:
            rewards = grid[rng.integers(len(grid), size=(num_states, num_actions))]
            stages.append(TabularMdp.from_tables([kernel], [rewards], risk_aversion,
                                                 admissible).stages[0])
    meta = {"name": "random", "seed": int(seed), "sizes": [num_states, num_actions, horizon]}
    return TabularMdp(horizon, num_states, num_actions, admissible, tuple(stages),
                      risk_aversion, meta)


def _outcome_stage(kernel, rewards, admissible):
    num_states, num_actions = admissible.shape
    post = np.full((num_states, num_actions), -1, dtype=np.int64)
    ptr, nxt, prob, rew = [0], [], [], []
    for s, a in zip(*np.nonzero(admissible)):
        post[s, a] = len(ptr) - 1
        nz = np.flatnonzero(kernel[s, a])
        nxt.extend(nz.tolist())
        prob.extend(kernel[s, a, nz].tolist())
        rew.extend(rewards[s, a, nz].tolist())
        ptr.append(len(prob))
    return Stage(post, np.zeros((num_states, num_actions)), ptr, nxt, prob, rew)


BUILTIN = {
    "queueing": (QueueingParams, build_queueing),
    "inventory": (InventoryParams, build_inventory),
}


def build_named(name: str, params: dict | None = None) -> TabularMdp:
    """Build a named benchmark model from a parameter mapping."""
    if name not in BUILTIN:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(BUILTIN)}")
    cls, build = BUILTIN[name]
    try:
        return build(cls(**(params or {})))
    except TypeError as exc:
        raise ModelError(f"bad parameters for {name}: {exc}") from exc


def state_value(mdp: TabularMdp, s: int) -> float:
    """Physical value of state index ``s`` (grid step times index by default)."""
    return float(mdp.metadata.get("state_step", 1.0)) * s


def state_index(mdp: TabularMdp, value: float) -> int:
    step = float(mdp.metadata.get("state_step", 1.0))
    s = int(round(value / step))
    if not 0 <= s < mdp.num_states or abs(s * step - value) > 1e-9 * max(1.0, abs(value)):
        raise ModelError(f"{value} is not a state of this model")
    return s
