"""Closed-form multi-period mean-variance portfolio selection.

Wealth evolves as s_{t+1} = e0_t s_t + Q_t' a_t with excess returns Q_t;
the criterion is E[s_T] - λ Var[s_T].  Policies are affine,
a_t = K_t s_t + b_t, and are evaluated exactly by a two-moment recursion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .evaluation import block_rng, sample_summary

BLOCK = 65_536


class PortfolioError(ValueError):
    pass


@dataclass(frozen=True)
class PortfolioSpec:
    riskless: np.ndarray  # (T,) riskless gross returns e0_t
    mean: np.ndarray  # (T, n) mean excess returns
    second_moment: np.ndarray  # (T, n, n) E[Q_t Q_t']
    risk_aversion: float

    def __post_init__(self):
        e0 = np.asarray(self.riskless, float)
        mu = np.asarray(self.mean, float)
        sig = np.asarray(self.second_moment, float)
        if e0.ndim != 1 or mu.shape[0] != len(e0) or sig.shape != mu.shape + mu.shape[1:]:
            raise PortfolioError("inconsistent stage dimensions")
        if np.any(e0 <= 0):
            raise PortfolioError("riskless returns must be positive")
        if not np.allclose(sig, np.swapaxes(sig, 1, 2)):
            raise PortfolioError("second-moment matrices must be symmetric")
        if not self.risk_aversion > 0:
            raise PortfolioError("risk aversion must be positive")
        object.__setattr__(self, "riskless", e0)
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "second_moment", sig)

    @classmethod
    def constant(cls, horizon: int, riskless: float, mean, second_moment,
                 risk_aversion: float) -> "PortfolioSpec":
        mean = np.asarray(mean, float)
        sig = np.asarray(second_moment, float)
        return cls(np.full(horizon, float(riskless)), np.tile(mean, (horizon, 1)),
                   np.tile(sig, (horizon, 1, 1)), float(risk_aversion))

    @classmethod
    def from_dict(cls, doc: dict) -> "PortfolioSpec":
        """Document with ``horizon``, ``riskless``, ``mean``, ``second_moment``, ``risk_aversion``.

        Entries may be given once (shared by all stages) or per stage.
        """
        T = int(doc["horizon"])
        e0 = np.broadcast_to(np.asarray(doc["riskless"], float), (T,))
        mu = np.asarray(doc["mean"], float)
        mu = np.broadcast_to(mu, (T, mu.shape[-1]))
        sig = np.asarray(doc["second_moment"], float)
        sig = np.broadcast_to(sig, (T,) + sig.shape[-2:])
        return cls(e0.copy(), mu.copy(), sig.copy(), float(doc["risk_aversion"]))

    @classmethod
    def load(cls, path) -> "PortfolioSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def as_dict(self) -> dict:
        return {"horizon": self.horizon, "riskless": self.riskless.tolist(),
                "mean": self.mean.tolist(), "second_moment": self.second_moment.tolist(),
                "risk_aversion": self.risk_aversion}

    @property
    def horizon(self) -> int:
        return len(self.riskless)

    @property
    def assets(self) -> int:
        return self.mean.shape[1]

    def tilts(self) -> np.ndarray:
        """Σ_t⁻¹ μ_t per stage, via Cholesky."""
        out = np.empty_like(self.mean)
        for t in range(self.horizon):
            try:
                out[t] = cho_solve(cho_factor(self.second_moment[t]), self.mean[t])
            except np.linalg.LinAlgError:
                raise PortfolioError(f"second-moment matrix of stage {t} is not positive definite") from None
        return out

    def c_factors(self) -> np.ndarray:
        """C_t = 1 - μ_t' Σ_t⁻¹ μ_t."""
        return 1.0 - np.einsum("ti,ti->t", self.mean, self.tilts())

    def warnings(self) -> list[str]:
        c = self.c_factors()
        return [f"C_{t} = {c[t]:.6g} outside (0, 1)" for t in range(self.horizon)
                if not 0.0 < c[t] < 1.0]


def example_spec() -> PortfolioSpec:
    """Three risky assets and a riskless one at 4% over four periods, λ = 2."""
    sigma = [[0.0295, 0.0438, 0.0374], [0.0438, 0.1278, 0.0491], [0.0374, 0.0491, 0.0642]]
    return PortfolioSpec.constant(4, 1.04, [0.122, 0.206, 0.188], sigma, 2.0)


@dataclass(frozen=True)
class LinearPolicy:
    """a_t = gain[t] * s_t + offset[t]."""

    gain: np.ndarray  # (T, n)
    offset: np.ndarray  # (T, n)

    def action(self, t: int, s: float) -> np.ndarray:
        return self.gain[t] * s + self.offset[t]

    @classmethod
    def zero(cls, spec: PortfolioSpec) -> "LinearPolicy":
        z = np.zeros_like(spec.mean)
        return cls(z, z.copy())


@dataclass(frozen=True)
class PortfolioSolution:
    s0: float
    y_star: float
    mv_star: float
    wealth_growth: float  # Π e0_t, the common slope of y* and J* in s0
    y_intercept: float
    mv_intercept: float
    state_coefficient: np.ndarray  # (T, n), Σ_t⁻¹ μ_t e0_t
    intercept_direction: np.ndarray  # (T, n), Σ_t⁻¹ μ_t
    intercept_scale: np.ndarray  # (T,), multiplies intercept_direction in the optimal policy
    policy: LinearPolicy
    c_product: float

    def as_dict(self) -> dict:
        return {
            "s0": self.s0, "y_star": self.y_star, "mv_star": self.mv_star,
            "y_coefficients": [self.wealth_growth, self.y_intercept],
            "mv_coefficients": [self.wealth_growth, self.mv_intercept],
            "state_coefficient": self.state_coefficient.tolist(),
            "intercept_direction": self.intercept_direction.tolist(),
            "intercept_scale": self.intercept_scale.tolist(),
            "c_product": self.c_product,
        }


def _later_discount(e0: np.ndarray) -> np.ndarray:
    """Π_{τ>t} 1/e0_τ for each t."""
    rev = np.cumprod(e0[::-1])[::-1]
    return np.append(rev[1:], 1.0) ** -1


def _products(spec: PortfolioSpec):
    c = spec.c_factors()
    pc = float(np.prod(c))
    if pc <= 0:
        raise PortfolioError("embedding degenerate: product of C_t is not positive")
    e0 = spec.riskless
    return c, pc, float(np.prod(e0)), float(np.prod(e0 * c)), float(np.prod(e0**2 * c))


def inner_policy(spec: PortfolioSpec, y: float) -> LinearPolicy:
    """Optimal policy of the pseudo mean-variance problem at pseudo mean ``y``."""
    tilt = spec.tilts()
    lam = spec.risk_aversion
    gain = -spec.riskless[:, None] * tilt
    offset = ((y + 1.0 / (2 * lam)) * _later_discount(spec.riskless))[:, None] * tilt
    return LinearPolicy(gain, offset)


def pseudo_value(spec: PortfolioSpec, s0: float, y) -> np.ndarray | float:
    """Optimal pseudo mean-variance Ĵ*_0(s0, y) in closed form."""
    _, pc, _, pec, pe2c = _products(spec)
    lam = spec.risk_aversion
    y = np.asarray(y, float)
    val = (-lam * pc * y**2 + (1 - pc + 2 * lam * pec * s0) * y
           + (1 - pc) / (4 * lam) + pec * s0 - lam * pe2c * s0**2)
    return float(val) if val.ndim == 0 else val


def solve_closed_form(spec: PortfolioSpec, s0: float) -> PortfolioSolution:
    c, pc, pe, _, _ = _products(spec)
    lam = spec.risk_aversion
    y_int = (1 - pc) / (2 * lam * pc)
    mv_int = (1 - pc) / (4 * lam * pc)
    tilt = spec.tilts()
    scale = (pe * s0 + 1.0 / (2 * lam * pc)) * _later_discount(spec.riskless)
    policy = LinearPolicy(-spec.riskless[:, None] * tilt, scale[:, None] * tilt)
    return PortfolioSolution(float(s0), pe * s0 + y_int, pe * s0 + mv_int, pe, y_int, mv_int,
                             spec.riskless[:, None] * tilt, tilt, scale, policy, pc)


@dataclass(frozen=True)
class WealthMoments:
    mean: float
    variance: float
    lam: float

    @property
    def mv(self) -> float:
        return self.mean - self.lam * self.variance

    def pseudo_mv(self, y: float) -> float:
        return self.mv - self.lam * (self.mean - y) ** 2


def moment_recursion_evaluate(spec: PortfolioSpec, policy: LinearPolicy, s0: float
                              ) -> WealthMoments:
    """Exact terminal-wealth mean and variance of an affine policy."""
    m1, m2 = float(s0), float(s0) ** 2
    for t in range(spec.horizon):
        e0, mu, sig = spec.riskless[t], spec.mean[t], spec.second_moment[t]
        k, b = policy.gain[t], policy.offset[t]
        ea = e0 + mu @ k
        eb = mu @ b
        ea2 = e0**2 + 2 * e0 * (mu @ k) + k @ sig @ k
        eab = e0 * eb + k @ sig @ b
        eb2 = b @ sig @ b
        m1, m2 = ea * m1 + eb, ea2 * m2 + 2 * eab * m1 + eb2
    return WealthMoments(m1, max(m2 - m1 * m1, 0.0), spec.risk_aversion)


def simulate_portfolio(spec: PortfolioSpec, policy: LinearPolicy, s0: float,
                       n_paths: int = 1_000_000, seed: int = 0):
    """Terminal-wealth sample moments with normal excess returns matching both moments."""
    chols = []
    for t in range(spec.horizon):
        cov = spec.second_moment[t] - np.outer(spec.mean[t], spec.mean[t])
        w, v = np.linalg.eigh(cov)
        if w.min() < -1e-12 * max(1.0, abs(w).max()):
            raise PortfolioError(f"stage {t}: implied covariance is not positive semidefinite")
        chols.append(v * np.sqrt(np.clip(w, 0.0, None)))
    out = np.empty(n_paths)
    for block, start in enumerate(range(0, n_paths, BLOCK)):
        rng = block_rng(seed, block)
        n = min(BLOCK, n_paths - start)
        s = np.full(n, float(s0))
        for t in range(spec.horizon):
            q = spec.mean[t] + rng.standard_normal((n, spec.assets)) @ chols[t].T
            a = s[:, None] * policy.gain[t] + policy.offset[t]
            s = spec.riskless[t] * s + np.einsum("pi,pi->p", q, a)
        out[start : start + n] = s
    return sample_summary(out)


@dataclass
class AlternationResult:
    y: list
    values: list  # Ĵ*_0(s0, y_k) along the iteration
    mv: list  # J of the inner-optimal policy at y_k
    converged: bool

    @property
    def y_star(self) -> float:
        return self.y[-1]


def alternate(spec: PortfolioSpec, s0: float, y0: float, *, tol: float = 1e-12,
              max_iters: int = 100_000) -> AlternationResult:
    """Pseudo-mean iteration: solve the inner problem at y, move y to its mean wealth."""
    y = float(y0)
    res = AlternationResult([y], [pseudo_value(spec, s0, y)], [], False)
    for _ in range(max_iters):
        mom = moment_recursion_evaluate(spec, inner_policy(spec, y), s0)
        res.mv.append(mom.mv)
        step = mom.mean - y
        y = mom.mean
        res.y.append(y)
        res.values.append(pseudo_value(spec, s0, y))
        if abs(step) <= tol:
            res.converged = True
            break
    return res
