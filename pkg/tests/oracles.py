"""Independent reference computations used by the tests.

Nothing here calls the solver code: models are read through their raw
outcome arrays and everything is done by explicit enumeration.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np


def outcomes(mdp, t, s, a):
    """[(prob, next state, total one-step reward)] of pair (s, a) at stage t."""
    stage = mdp.stages[t]
    m = stage.post_state[s, a]
    lo, hi = stage.ptr[m], stage.ptr[m + 1]
    d = stage.decision_reward[s, a]
    return [(float(stage.prob[o]), int(stage.next_state[o]), float(d + stage.reward[o]))
            for o in range(lo, hi)]


def moment_pairs(mdp, s0):
    """All (E[R], E[R²]) pairs over deterministic history-dependent policies.

    A history is everything observed so far (states, actions and realized
    rewards), so every outcome branch may continue with its own policy.
    Duplicate pairs are merged, which cannot change any maximum.
    """
    T = mdp.horizon
    nxt = {s: np.zeros((1, 2)) for s in range(mdp.num_states)}
    for t in range(T - 1, -1, -1):
        cur = {}
        for s in range(mdp.num_states):
            sets = []
            for a in np.flatnonzero(mdp.admissible[s]):
                m1 = np.zeros(1)
                m2 = np.zeros(1)
                for p, s2, r in outcomes(mdp, t, s, a):
                    b = nxt[s2]
                    c1 = p * (r + b[:, 0])
                    c2 = p * (r * r + 2 * r * b[:, 0] + b[:, 1])
                    m1 = np.add.outer(m1, c1).ravel()
                    m2 = np.add.outer(m2, c2).ravel()
                sets.append(np.column_stack([m1, m2]))
            cur[s] = np.unique(np.round(np.vstack(sets), 12), axis=0)
        nxt = cur
    return nxt[s0]


def best_mv(mdp, s0):
    """max over policies of E[R] - λ Var[R]."""
    p = moment_pairs(mdp, s0)
    return float(np.max(p[:, 0] - mdp.risk_aversion * (p[:, 1] - p[:, 0] ** 2)))


def best_pseudo(mdp, s0, y):
    """max over policies of E[R] - λ E[(R - y)²]."""
    p = moment_pairs(mdp, s0)
    return float(np.max(p[:, 0] - mdp.risk_aversion * (p[:, 1] - 2 * y * p[:, 0] + y * y)))


def reward_distribution(mdp, action_fn, s0):
    """{total reward: probability} of a history policy, by trajectory enumeration.

    ``action_fn(t, s, past_rewards)`` returns the action.
    """
    paths = [(1.0, s0, ())]
    for t in range(mdp.horizon):
        new = []
        for w, s, past in paths:
            a = action_fn(t, s, past)
            assert mdp.admissible[s, a]
            for p, s2, r in outcomes(mdp, t, s, a):
                new.append((w * p, s2, past + (r,)))
        paths = new
    dist = defaultdict(float)
    for w, _, past in paths:
        dist[round(sum(past), 9)] += w
    return dict(dist)


def moments_of(dist):
    r = np.array(list(dist.keys()))
    p = np.array(list(dist.values()))
    return float(p @ r), float(p @ r**2)


def value_by_recursion(mdp, action_fn, s0, y0):
    """Ĵ(y0) of a history policy by plain recursion over trajectories."""
    lam = mdp.risk_aversion

    def go(t, s, past):
        if t == mdp.horizon:
            y = y0 - sum(past)
            return -lam * y * y
        a = action_fn(t, s, past)
        return sum(p * (r + go(t + 1, s2, past + (r,))) for p, s2, r in outcomes(mdp, t, s, a))

    return go(0, s0, ())
