"""Policy representations on the augmented (state, pseudo-mean) space."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .lattice import Box, RewardGrid

ACTION_DTYPE = np.int16


class PolicyUndefinedError(LookupError):
    """A policy was queried at a cell where it has no action."""

    def __init__(self, t: int, s: int, y: float):
        super().__init__(f"policy undefined at t={t}, s={s}, y={y:.12g}")
        self.t, self.s, self.y = t, s, y


@dataclass(frozen=True, eq=False)
class AugmentedPolicy:
    """Deterministic decision rule per stage on cells (s, y = anchor - unit * k).

    ``tables[t][s, k - box.klo[t]]`` is the action, or -1 where undefined.
    """

    grid: RewardGrid
    box: Box
    anchor: float
    tables: tuple

    def __post_init__(self):
        for tab in self.tables:
            tab.flags.writeable = False

    @property
    def horizon(self) -> int:
        return len(self.tables)

    def index_of(self, y: float) -> int:
        """Reward index of pseudo mean ``y`` (nearest grid point when quantized)."""
        k = (self.anchor - y) / self.grid.unit
        kr = int(round(k))
        if self.grid.exact and abs(k - kr) > 1e-6:
            raise PolicyUndefinedError(-1, -1, y)
        return kr

    def action_at_index(self, t: int, s: int, k: int) -> int:
        tab = self.tables[t]
        c = k - int(self.box.klo[t])
        a = int(tab[s, c]) if 0 <= c < tab.shape[1] and 0 <= s < tab.shape[0] else -1
        if a < 0:
            raise PolicyUndefinedError(t, s, self.anchor - self.grid.unit * k)
        return a

    def action(self, t: int, s: int, y: float) -> int:
        try:
            return self.action_at_index(t, s, self.index_of(y))
        except PolicyUndefinedError:
            raise PolicyUndefinedError(t, s, y) from None

    def with_action(self, t: int, s: int, k: int, a: int) -> "AugmentedPolicy":
        """Copy with the action at cell (t, s, k) replaced."""
        tables = list(self.tables)
        tab = tables[t].copy()
        tab[s, k - int(self.box.klo[t])] = a
        tables[t] = tab
        return AugmentedPolicy(self.grid, self.box, self.anchor, tuple(tables))

    def view(self, y0: float | None = None) -> "HistoryPolicyView":
        return HistoryPolicyView(self.anchor if y0 is None else float(y0), self)


@dataclass(frozen=True, eq=False)
class HistoryPolicyView:
    """History-dependent policy u_t(h_t) = policy_t(s_t, y0 - sum of past rewards)."""

    y0: float
    policy: AugmentedPolicy

    @property
    def shift(self) -> int:
        """Reward index of the root within the policy's tables."""
        return self.policy.index_of(self.y0)

    def action(self, state: int, past_rewards=()) -> int:
        """Action after the realized one-step rewards ``past_rewards`` (one per stage).

        Each reward is snapped to the grid individually, as the solver does.
        """
        unit = self.policy.grid.unit
        k = self.shift + sum(int(round(r / unit)) for r in past_rewards)
        t = len(past_rewards)
        try:
            return self.policy.action_at_index(t, state, k)
        except PolicyUndefinedError:
            raise PolicyUndefinedError(t, state, self.y0 - sum(past_rewards)) from None


@dataclass(frozen=True, eq=False)
class MixedPolicy:
    """Mixture of two policies with weight ``delta`` on the second.

    ``mode='policy'`` draws one component for the whole trajectory;
    ``mode='kernel'`` mixes the decision rules at every stage.
    """

    first: AugmentedPolicy | HistoryPolicyView
    second: AugmentedPolicy | HistoryPolicyView
    delta: float
    mode: str = "policy"

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"mixing weight {self.delta} outside [0, 1]")
        if self.mode not in ("policy", "kernel"):
            raise ValueError(f"unknown mixing mode {self.mode!r}")


def resolve(policy, y0: float | None = None) -> tuple[AugmentedPolicy, int, float]:
    """(tables, root index shift, root y) of an AugmentedPolicy or a view."""
    if isinstance(policy, HistoryPolicyView):
        return policy.policy, policy.shift, policy.y0
    if isinstance(policy, AugmentedPolicy):
        root = policy.anchor if y0 is None else float(y0)
        return policy, policy.index_of(root), root
    raise TypeError(f"not a policy: {type(policy).__name__}")


def fingerprint(policy: AugmentedPolicy, shift: int, masks, box: Box) -> str:
    """Hash of the actions on reached cells, independent of how they are stored.

    ``masks[t]`` flags reached cells of ``box``, a box whose reward indices
    are relative to the root; ``shift`` is the root's index in the policy
    tables.  Each stage is cropped to the bounding rectangle of its mask and
    keyed by its offset from the root, so equal history policies hash
    equally whatever pseudo mean or sweep box they were solved on.
    """
    h = hashlib.blake2b(digest_size=8)
    for t in range(policy.horizon):
        mask = masks[t]
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if len(rows) == 0:
            h.update(b"|empty")
            continue
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        off = shift + int(box.klo[t] - policy.box.klo[t])
        acts = policy.tables[t][r0:r1, c0 + off : c1 + off]
        sub = np.where(mask[r0:r1, c0:c1], acts, -2)
        k0 = int(box.klo[t]) + int(c0)
        h.update(np.array([t, r0, k0, r1 - r0, c1 - c0], dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(sub, dtype=np.int16).tobytes())
    return h.hexdigest()


POLICY_SCHEMA = "mvmdp-policy/1"


def _runs(row: np.ndarray) -> list:
    edges = np.flatnonzero(np.diff(row)) + 1
    starts = np.concatenate([[0], edges])
    lengths = np.diff(np.concatenate([starts, [len(row)]]))
    return [[int(row[a]), int(n)] for a, n in zip(starts, lengths)]


def policy_to_document(policy: AugmentedPolicy, root: float | None = None) -> dict:
    """JSON-ready document; each table row is run-length encoded as [action, count] pairs."""
    box = policy.box
    return {
        "schema": POLICY_SCHEMA,
        "anchor": policy.anchor,
        "root": policy.anchor if root is None else float(root),
        "unit": policy.grid.unit,
        "exact": policy.grid.exact,
        "box": {"roots": list(box.roots), "k_root": list(box.k_root)},
        "stages": [{"klo": int(box.klo[t]),
                    "rows": {str(int(s)): _runs(tab[s]) for s in box.states[t]
                             if np.any(tab[s] >= 0)}}
                   for t, tab in enumerate(policy.tables)],
    }


def policy_from_document(doc: dict, mdp) -> HistoryPolicyView:
    """Rebuild a policy document against its model; returns the view at the stored root."""
    from .lattice import make_box, reward_grid

    if doc.get("schema") != POLICY_SCHEMA:
        raise ValueError(f"not a policy document (schema {doc.get('schema')!r})")
    grid = reward_grid(mdp, None if doc["exact"] else float(doc["unit"]))
    if abs(grid.unit - float(doc["unit"])) > 1e-12 * max(1.0, abs(grid.unit)):
        raise ValueError("policy reward unit does not match the model")
    box = make_box(mdp, grid, doc["box"]["roots"], tuple(doc["box"]["k_root"]))
    if len(doc["stages"]) != mdp.horizon:
        raise ValueError("policy horizon does not match the model")
    tables = []
    for t, st in enumerate(doc["stages"]):
        if int(st["klo"]) != int(box.klo[t]):
            raise ValueError(f"stage {t}: policy box does not match the model")
        tab = np.full((mdp.num_states, box.width(t)), -1, dtype=ACTION_DTYPE)
        for s, runs in st["rows"].items():
            acts = np.repeat([a for a, _ in runs], [n for _, n in runs])
            if len(acts) != box.width(t):
                raise ValueError(f"stage {t}, state {s}: row length mismatch")
            tab[int(s)] = acts
        tables.append(tab)
    pol = AugmentedPolicy(grid, box, float(doc["anchor"]), tuple(tables))
    return HistoryPolicyView(float(doc["root"]), pol)
