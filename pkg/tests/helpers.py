"""Small models and policy builders shared by the tests."""

import numpy as np

from mvmdp.dp import backward_induction
from mvmdp.mdp import TabularMdp
from mvmdp.policies import AugmentedPolicy


def chain_mdp(rewards=(1.0, 2.0), lam=2.0):
    """One state, one action, deterministic rewards per stage."""
    kernel = np.ones((1, 1, 1))
    return TabularMdp.from_tables([kernel] * len(rewards),
                                  [np.array([[r]]) for r in rewards], lam)


def coin_mdp(lam=2.0):
    """One stage, reward 0 or 1 with probability 1/2 each."""
    return TabularMdp.from_outcomes(1, 1, [{(0, 0): [(0.5, 0, 0.0), (0.5, 0, 1.0)]}], lam)


def random_policy(mdp, s0, y0, rng):
    """Uniformly random admissible action at every box cell."""
    base = backward_induction(mdp, s0, y0).policy
    tables = []
    for t, tab in enumerate(base.tables):
        new = np.full_like(tab, -1)
        for s in base.box.states[t]:
            acts = mdp.actions(s)
            new[s] = rng.choice(acts, size=tab.shape[1])
        tables.append(new)
    return AugmentedPolicy(base.grid, base.box, base.anchor, tuple(tables))


def action_fn(policy, y0=None):
    """History policy as a function (t, s, past rewards) -> action."""
    view = policy.view(y0)
    return lambda t, s, past: view.action(s, past)
