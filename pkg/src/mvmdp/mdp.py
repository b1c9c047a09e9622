"""Finite-horizon MDP data model.

Every model is stored in post-decision form: an admissible pair (s, a) moves
to a post-decision state ``m`` and earns a decision reward, then ``m`` branches
into outcomes ``(s', p, r)`` whose reward is realized together with the
transition.  A plain tabular model uses one post-decision state per pair and
zero outcome rewards; noise-driven models (where the reward depends on the
realized disturbance) share post-decision states across pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

SCHEMA = "mvmdp-model/1"
ROW_MASS_TOL = 1e-12


class ModelError(ValueError):
    """A model document or model object is malformed or invalid."""


@dataclass(frozen=True, eq=False)
class Stage:
    """One decision epoch in post-decision form."""

    post_state: np.ndarray  # (S, A) int64, -1 where the pair is inadmissible
    decision_reward: np.ndarray  # (S, A) float64
    ptr: np.ndarray  # (M + 1,) int64 CSR pointers into the outcome arrays
    next_state: np.ndarray  # (nnz,) int64
    prob: np.ndarray  # (nnz,) float64
    reward: np.ndarray  # (nnz,) float64, realized with the outcome

    def __post_init__(self):
        for name in ("post_state", "ptr", "next_state"):
            _freeze(self, name, np.int64)
        for name in ("decision_reward", "prob", "reward"):
            _freeze(self, name, np.float64)

    @property
    def num_post_states(self) -> int:
        return len(self.ptr) - 1

    def outcomes(self, s: int, a: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(next states, probabilities, total one-step rewards) of pair (s, a)."""
        m = self.post_state[s, a]
        if m < 0:
            raise ModelError(f"action {a} is not admissible at state {s}")
        lo, hi = self.ptr[m], self.ptr[m + 1]
        return (
            self.next_state[lo:hi],
            self.prob[lo:hi],
            self.decision_reward[s, a] + self.reward[lo:hi],
        )

    def expected_reward(self) -> np.ndarray:
        """(S, A) expected one-step reward; NaN for inadmissible pairs."""
        lengths = np.diff(self.ptr)
        rows = np.repeat(np.arange(self.num_post_states), lengths)
        post_mean = np.bincount(rows, self.prob * self.reward, minlength=self.num_post_states)
        out = np.full(self.post_state.shape, np.nan)
        ok = self.post_state >= 0
        out[ok] = self.decision_reward[ok] + post_mean[self.post_state[ok]]
        return out

    def kernel(self, num_states: int) -> sp.csr_matrix:
        """Marginal transition kernel with one row per (s, a), row index s*A + a.

        Rows of inadmissible pairs are empty.
        """
        num_actions = self.post_state.shape[1]
        post = sp.csr_matrix(
            (self.prob, self.next_state, self.ptr), shape=(self.num_post_states, num_states)
        )
        flat = self.post_state.ravel()
        ok = np.flatnonzero(flat >= 0)
        select = sp.csr_matrix(
            (np.ones(len(ok)), (ok, flat[ok])), shape=(len(flat), self.num_post_states)
        )
        assert select.shape[0] == num_states * num_actions
        return (select @ post).tocsr()


def _freeze(obj, name, dtype):
    arr = np.array(getattr(obj, name), dtype=dtype, copy=True)
    arr.flags.writeable = False
    object.__setattr__(obj, name, arr)


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite-horizon MDP with dense integer states and actions.

    ``stages`` has one entry per decision epoch; time-homogeneous models may
    repeat the same Stage object.  Construction does not validate; call
    :func:`validate` (solvers do so themselves).
    """

    horizon: int
    num_states: int
    num_actions: int
    admissible: np.ndarray  # (S, A) bool
    stages: tuple[Stage, ...]
    risk_aversion: float
    metadata: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        _freeze(self, "admissible", bool)
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "risk_aversion", float(self.risk_aversion))

    @property
    def lam(self) -> float:
        return self.risk_aversion

    def actions(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.admissible[s])

    @cached_property
    def action_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Admissible actions as CSR arrays (ptr over states, action indices)."""
        counts = self.admissible.sum(axis=1)
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        idx = np.nonzero(self.admissible)[1].astype(np.int64)
        return ptr, idx

    def stage_reward_range(self, t: int, states=None) -> tuple[float, float]:
        """Min/max one-step reward at stage t over admissible pairs of ``states``."""
        stage = self.stages[t]
        rows = np.arange(self.num_states) if states is None else np.asarray(states, np.int64)
        post = stage.post_state[rows]
        ok = self.admissible[rows] & (post >= 0)
        m = post[ok]
        d = stage.decision_reward[rows][ok]
        nonempty = np.diff(stage.ptr)[m] > 0
        if not nonempty.any():
            return np.inf, -np.inf
        m, d = m[nonempty], d[nonempty]
        starts = stage.ptr[:-1]
        filled = np.diff(stage.ptr) > 0
        lo_post = np.full(stage.num_post_states, np.inf)
        hi_post = np.full(stage.num_post_states, -np.inf)
        lo_post[filled] = np.minimum.reduceat(stage.reward, starts[filled])
        hi_post[filled] = np.maximum.reduceat(stage.reward, starts[filled])
        return float((d + lo_post[m]).min()), float((d + hi_post[m]).max())

    @cached_property
    def reward_bounds(self) -> tuple[float, float]:
        """(r_min, r_max) over every stored one-step reward."""
        ranges = [self.stage_reward_range(t) for t in range(self.horizon)]
        lo = min(r[0] for r in ranges)
        hi = max(r[1] for r in ranges)
        if not np.isfinite(lo):
            return 0.0, 0.0
        return float(lo), float(hi)

    def reachable_states(self, s0) -> list[np.ndarray]:
        """Sorted reachable state indices per stage 0..T from ``s0`` (int or list)."""
        current = np.unique(np.atleast_1d(np.asarray(s0, dtype=np.int64)))
        out = [current]
        for t in range(self.horizon):
            stage = self.stages[t]
            posts = stage.post_state[current][self.admissible[current]]
            posts = np.unique(posts[posts >= 0])
            nxt = [stage.next_state[stage.ptr[m] : stage.ptr[m + 1]] for m in posts]
            current = np.unique(np.concatenate(nxt)) if nxt else np.zeros(0, np.int64)
            out.append(current)
        return out

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_tables(cls, kernels, rewards, risk_aversion: float, admissible=None, metadata=None):
        """Build from per-stage dense kernels (S, A, S) and rewards (S, A).

        The horizon is the number of stages; repeating the same array objects
        (``[kernel] * T``) yields one shared Stage.
        """
        kernels, rewards, horizon = _per_stage(kernels, rewards)
        first = np.asarray(kernels[0], dtype=float)
        num_states, num_actions = first.shape[:2]
        if admissible is None:
            admissible = np.ones((num_states, num_actions), dtype=bool)
        admissible = np.asarray(admissible, dtype=bool)
        built = {}
        stages = []
        for kern, rew in zip(kernels, rewards):
            key = (id(kern), id(rew))
            if key not in built:
                built[key] = _tabular_stage(
                    np.asarray(kern, dtype=float), np.asarray(rew, dtype=float), admissible
                )
            stages.append(built[key])
        return cls(horizon, num_states, num_actions, admissible, tuple(stages),
                   risk_aversion, dict(metadata or {}))

    @classmethod
    def from_outcomes(cls, num_states, num_actions, stage_outcomes, risk_aversion,
                      admissible=None, metadata=None):
        """Build from per-stage maps ``{(s, a): [(prob, s', reward), ...]}``.

        Admissibility defaults to the pairs present in the first stage map.
        """
        if admissible is None:
            admissible = np.zeros((num_states, num_actions), dtype=bool)
            for s, a in stage_outcomes[0]:
                admissible[s, a] = True
        admissible = np.asarray(admissible, dtype=bool)
        stages = []
        for table in stage_outcomes:
            post = np.full((num_states, num_actions), -1, dtype=np.int64)
            ptr, nxt, prob, rew = [0], [], [], []
            for s, a in zip(*np.nonzero(admissible)):
                post[s, a] = len(ptr) - 1
                for p, s2, r in table[(int(s), int(a))]:
                    prob.append(p)
                    nxt.append(s2)
                    rew.append(r)
                ptr.append(len(prob))
            stages.append(Stage(post, np.zeros((num_states, num_actions)), ptr, nxt, prob, rew))
        return cls(len(stages), num_states, num_actions, admissible, tuple(stages),
                   risk_aversion, dict(metadata or {}))


def _per_stage(kernels, rewards):
    if isinstance(kernels, np.ndarray) and kernels.ndim == 3:
        raise ModelError("pass a list of per-stage kernels (e.g. [kernel] * T)")
    kernels = list(kernels)
    rewards = list(rewards)
    if len(kernels) != len(rewards):
        raise ModelError("kernels and rewards must have one entry per stage")
    return kernels, rewards, len(kernels)


def _tabular_stage(kernel, reward, admissible):
    num_states, num_actions = admissible.shape
    post = np.full((num_states, num_actions), -1, dtype=np.int64)
    drew = np.zeros((num_states, num_actions))
    ptr, nxt, prob = [0], [], []
    for s, a in zip(*np.nonzero(admissible)):
        post[s, a] = len(ptr) - 1
        drew[s, a] = reward[s, a]
        row = kernel[s, a]
        nz = np.flatnonzero(row)
        nxt.extend(nz.tolist())
        prob.extend(row[nz].tolist())
        ptr.append(len(prob))
    return Stage(post, drew, ptr, nxt, prob, np.zeros(len(prob)))


# -- validation -------------------------------------------------------------


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "valid" if self.ok else "; ".join(self.violations)


def validate(mdp: TabularMdp) -> ValidationReport:
    """List every violated model invariant (empty report means valid)."""
    report = ValidationReport()
    bad = report.violations
    if mdp.horizon < 1:
        bad.append(f"horizon {mdp.horizon} < 1")
    if len(mdp.stages) != mdp.horizon:
        bad.append(f"{len(mdp.stages)} stages for horizon {mdp.horizon}")
    if not (mdp.risk_aversion >= 0):
        bad.append(f"lambda {mdp.risk_aversion} < 0")
    if mdp.admissible.shape != (mdp.num_states, mdp.num_actions):
        bad.append(f"admissible mask shape {mdp.admissible.shape} != "
                   f"({mdp.num_states}, {mdp.num_actions})")
        return report
    for s in np.flatnonzero(~mdp.admissible.any(axis=1)):
        bad.append(f"A({s}) empty")
    seen = {}
    for t, stage in enumerate(mdp.stages):
        if id(stage) in seen:
            continue
        seen[id(stage)] = t
        bad.extend(_stage_violations(mdp, t, stage))
    return report


def _stage_violations(mdp, t, stage):
    out = []
    if stage.post_state.shape != (mdp.num_states, mdp.num_actions):
        return [f"stage {t}: post-state table has shape {stage.post_state.shape}"]
    n_post = stage.num_post_states
    if np.any(np.diff(stage.ptr) < 0) or stage.ptr[0] != 0 or stage.ptr[-1] != len(stage.prob):
        return [f"stage {t}: malformed outcome pointers"]
    if np.any(stage.post_state[mdp.admissible] < 0) or np.any(stage.post_state >= n_post):
        out.append(f"stage {t}: admissible pair without a valid post-decision state")
    if np.any(stage.post_state[~mdp.admissible] >= 0):
        out.append(f"stage {t}: post-decision state assigned to an inadmissible pair")
    if len(stage.next_state) and (stage.next_state.min() < 0
                                  or stage.next_state.max() >= mdp.num_states):
        out.append(f"stage {t}: next state outside 0..{mdp.num_states - 1}")
    if np.any(stage.prob < 0):
        o = int(np.flatnonzero(stage.prob < 0)[0])
        out.append(f"stage {t}: negative probability {stage.prob[o]:g}")
    if not (np.all(np.isfinite(stage.reward)) and np.all(np.isfinite(stage.decision_reward))):
        out.append(f"stage {t}: non-finite reward")
    mass = np.add.reduceat(stage.prob, stage.ptr[:-1]) if len(stage.prob) else np.zeros(n_post)
    mass[np.diff(stage.ptr) == 0] = 0.0
    for s, a in zip(*np.nonzero(mdp.admissible)):
        m = stage.post_state[s, a]
        if 0 <= m < n_post and abs(mass[m] - 1.0) > ROW_MASS_TOL:
            out.append(f"stage {t} (s={s}, a={a}): row mass {mass[m]:.12g} ≠ 1")
    return out


def ensure_valid(mdp: TabularMdp) -> None:
    """Raise ModelError unless the model is valid; the verdict is cached."""
    report = mdp._cache.get("validation")
    if report is None:
        report = mdp._cache["validation"] = validate(mdp)
    if not report.ok:
        raise ModelError(str(report))


def pseudo_mean_domain(mdp: TabularMdp, s0=None) -> tuple[float, float]:
    """Interval [T r_min, T r_max] containing every accumulated reward.

    With ``s0`` the bounds use only rewards of pairs reachable from ``s0``.
    """
    if s0 is None:
        lo, hi = mdp.reward_bounds
    else:
        reach = mdp.reachable_states(s0)
        ranges = [mdp.stage_reward_range(t, reach[t]) for t in range(mdp.horizon)]
        lo = min(r[0] for r in ranges)
        hi = max(r[1] for r in ranges)
    return mdp.horizon * lo, mdp.horizon * hi


# -- JSON documents ---------------------------------------------------------


def _is_tabular(stage: Stage, admissible: np.ndarray) -> bool:
    order = stage.post_state[admissible]
    return (np.array_equal(order, np.arange(stage.num_post_states))
            and not np.any(stage.reward)
            and bool(np.all(stage.prob > 0)))


def to_document(mdp: TabularMdp, noise_atoms: bool = False) -> dict:
    """JSON-ready dict.  ``noise_atoms`` writes noise models as atom lists."""
    adm = [np.flatnonzero(row).tolist() for row in mdp.admissible]
    stages = []
    index = {}
    for t, stage in enumerate(mdp.stages):
        if id(stage) in index:
            stages.append({"ref": index[id(stage)]})
            continue
        index[id(stage)] = t
        stages.append(_stage_document(stage, mdp.admissible, adm, noise_atoms))
    doc = {
        "schema": SCHEMA,
        "horizon": mdp.horizon,
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "admissible": adm,
        "lambda": mdp.risk_aversion,
        "stages": stages,
    }
    if mdp.metadata:
        doc["metadata"] = mdp.metadata
    return doc


def _stage_document(stage, mask, adm, noise_atoms):
    rows = [(s, a) for s, acts in enumerate(adm) for a in acts]
    if _is_tabular(stage, mask):
        kernel = []
        for s, a in rows:
            m = stage.post_state[s, a]
            lo, hi = stage.ptr[m], stage.ptr[m + 1]
            kernel.append([[int(n), float(p)] for n, p in
                           zip(stage.next_state[lo:hi], stage.prob[lo:hi])])
        reward = [[float(stage.decision_reward[s, a]) for a in acts] for s, acts in enumerate(adm)]
        return {"kernel": kernel, "reward": reward}
    if noise_atoms:
        return {"atoms": _atoms_of(stage, adm)}
    outcomes = []
    for m in range(stage.num_post_states):
        lo, hi = stage.ptr[m], stage.ptr[m + 1]
        outcomes.append([[int(n), float(p), float(r)] for n, p, r in
                         zip(stage.next_state[lo:hi], stage.prob[lo:hi], stage.reward[lo:hi])])
    return {
        "post_decision": {
            "post_state": [[int(stage.post_state[s, a]) for a in acts] for s, acts in enumerate(adm)],
            "decision_reward": [[float(stage.decision_reward[s, a]) for a in acts]
                                for s, acts in enumerate(adm)],
            "outcomes": outcomes,
        }
    }


def _atoms_of(stage, adm):
    """Noise atoms; requires every post-state to share one probability vector."""
    first = stage.prob[stage.ptr[0] : stage.ptr[1]]
    n = len(first)
    if not np.all(np.diff(stage.ptr) == n) or not np.allclose(
        stage.prob.reshape(-1, n), first, rtol=0, atol=0
    ):
        raise ModelError("stage has no common noise distribution; use the post_decision form")
    atoms = []
    for i, p in enumerate(first):
        nxt, rew = [], []
        for s, acts in enumerate(adm):
            nr, rr = [], []
            for a in acts:
                o = stage.ptr[stage.post_state[s, a]] + i
                nr.append(int(stage.next_state[o]))
                rr.append(float(stage.decision_reward[s, a] + stage.reward[o]))
            nxt.append(nr)
            rew.append(rr)
        atoms.append({"prob": float(p), "next": nxt, "reward": rew})
    return atoms


def _number(x) -> float:
    return float(x) if isinstance(x, str) else x


def from_document(doc: dict) -> TabularMdp:
    """Parse a model document (raises ModelError on structural problems)."""
    try:
        if doc.get("schema", SCHEMA) != SCHEMA:
            raise ModelError(f"unsupported schema {doc.get('schema')!r}")
        horizon = int(doc["horizon"])
        num_states = int(doc["num_states"])
        num_actions = int(doc["num_actions"])
        adm = [[int(a) for a in acts] for acts in doc["admissible"]]
        if len(adm) != num_states:
            raise ModelError("admissible list length differs from num_states")
        mask = np.zeros((num_states, num_actions), dtype=bool)
        for s, acts in enumerate(adm):
            if any(a < 0 or a >= num_actions for a in acts):
                raise ModelError(f"admissible action out of range at state {s}")
            mask[s, acts] = True
        stages = []
        for t, entry in enumerate(doc["stages"]):
            if "ref" in entry:
                ref = int(entry["ref"])
                if not 0 <= ref < t:
                    raise ModelError(f"stage {t} references stage {ref}")
                stages.append(stages[ref])
            else:
                stages.append(_parse_stage(entry, adm, num_states, num_actions))
        if len(stages) != horizon:
            raise ModelError(f"{len(stages)} stages for horizon {horizon}")
        return TabularMdp(horizon, num_states, num_actions, mask, tuple(stages),
                          _number(doc["lambda"]), dict(doc.get("metadata", {})))
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"malformed model document: {exc!r}") from exc


def _parse_stage(entry, adm, num_states, num_actions):
    post = np.full((num_states, num_actions), -1, dtype=np.int64)
    drew = np.zeros((num_states, num_actions))
    rows = [(s, a) for s, acts in enumerate(adm) for a in acts]
    ptr, nxt, prob, rew = [0], [], [], []
    if "kernel" in entry:
        if len(entry["kernel"]) != len(rows):
            raise ModelError("kernel needs one row per admissible (s, a) pair")
        for i, ((s, a), row) in enumerate(zip(rows, entry["kernel"])):
            post[s, a] = i
            drew[s, a] = _number(entry["reward"][s][adm[s].index(a)])
            for n, p in row:
                nxt.append(int(n))
                prob.append(_number(p))
            ptr.append(len(prob))
        rew = [0.0] * len(prob)
    elif "post_decision" in entry:
        pd = entry["post_decision"]
        for s, acts in enumerate(adm):
            for i, a in enumerate(acts):
                post[s, a] = int(pd["post_state"][s][i])
                drew[s, a] = _number(pd["decision_reward"][s][i])
        for row in pd["outcomes"]:
            for n, p, r in row:
                nxt.append(int(n))
                prob.append(_number(p))
                rew.append(_number(r))
            ptr.append(len(prob))
    elif "atoms" in entry:
        atoms = entry["atoms"]
        for i, (s, a) in enumerate(rows):
            post[s, a] = i
            j = adm[s].index(a)
            for atom in atoms:
                nxt.append(int(atom["next"][s][j]))
                prob.append(_number(atom["prob"]))
                rew.append(_number(atom["reward"][s][j]))
            ptr.append(len(prob))
    else:
        raise ModelError("stage needs 'kernel', 'post_decision' or 'atoms'")
    return Stage(post, drew, ptr, nxt, prob, rew)


def save(mdp: TabularMdp, path, noise_atoms: bool = False) -> None:
    Path(path).write_text(json.dumps(to_document(mdp, noise_atoms)))


def load(path) -> TabularMdp:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not valid JSON ({exc})") from exc
    return from_document(doc)
