"""Max-min experiment design and the analytic bound quantities.

For each hypothesis ``i`` the design problem is

    D_i = max over mixtures lam of  min_{j != i}  sum_a lam(a) D(q_i^a || q_j^a),

solved here as the epigraph LP (maximise ``t`` with one constraint per
alternative).  The mixture attaining it is what Procedure A samples from
while ``i`` leads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, NamedTuple, Sequence

import numpy as np

from . import simplex
from .errors import (
    IndistinguishablePair,
    InfeasibleDesign,
    IndexOutOfRange,
    ParameterOutOfRange,
    SOutOfRange,
    TooManyActions,
)
from .obs_models import (
    KL_POSITIVE_TOL,
    Mixture,
    Model,
    chernoff_coefficient,
    discrimination_mask,
    kl_table,
)

S_GRID = np.round(np.arange(1, 100) / 100.0, 2)


@dataclass(frozen=True, eq=False)
class DesignSolution:
    model: Model = field(repr=False)
    lambdas: np.ndarray
    D: np.ndarray
    kl_table: np.ndarray = field(repr=False)
    beta: float
    beta_argmin: tuple[int, int, int]
    solver_meta: tuple[dict[str, Any], ...] = ()

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, DesignSolution)
            and self.model == other.model
            and np.array_equal(self.lambdas, other.lambdas)
            and np.array_equal(self.D, other.D)
            and self.beta == other.beta
        )

    def __hash__(self) -> int:
        return hash((self.model, self.lambdas.tobytes(), self.D.tobytes()))

    def mixture(self, i: int) -> Mixture:
        return Mixture(self.lambdas[i])

    @property
    def has_positive_beta(self) -> bool:
        return self.beta > 0.0

    def objective(self, i: int, weights: np.ndarray | None = None) -> float:
        """min_{j != i} sum_a w(a) D(q_i^a || q_j^a) for ``w`` (default: lambda_i)."""
        w = self.lambdas[i] if weights is None else np.asarray(weights, dtype=np.float64)
        return _maxmin_objective(self.kl_table, i, w[None, :])[0]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "hypotheses": list(self.model.hypotheses),
            "actions": list(self.model.actions),
            "lambda": self.lambdas.tolist(),
            "D": self.D.tolist(),
            "beta": self.beta,
            "beta_argmin": list(self.beta_argmin),
            "kl_table": self.kl_table.tolist(),
            "solver_meta": list(self.solver_meta),
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any], model: Model) -> DesignSolution:
        return cls(
            model=model,
            lambdas=np.asarray(data["lambda"], dtype=np.float64),
            D=np.asarray(data["D"], dtype=np.float64),
            kl_table=np.asarray(data["kl_table"], dtype=np.float64),
            beta=float(data["beta"]),
            beta_argmin=tuple(int(v) for v in data["beta_argmin"]),
            solver_meta=tuple(data.get("solver_meta", ())),
        )


def _maxmin_objective(kl: np.ndarray, i: int, weights: np.ndarray) -> np.ndarray:
    others = [j for j in range(kl.shape[0]) if j != i]
    return (weights @ kl[i, others].T).min(axis=1)


def _check_i(model: Model, i: int) -> None:
    if not 0 <= i < model.num_hypotheses:
        raise IndexOutOfRange(f"hypothesis index {i} outside [0, {model.num_hypotheses})")


def _solve(model: Model, i: int, kl: np.ndarray) -> tuple[Mixture, float, dict[str, Any]]:
    _check_i(model, i)
    M, K = model.num_hypotheses, model.num_actions
    others = [j for j in range(M) if j != i]
    rows = kl[i, others]
    dead = [j for j, r in zip(others, rows) if not np.any(r > KL_POSITIVE_TOL)]
    if dead:
        raise InfeasibleDesign(f"no action separates hypothesis {i} from {dead[0]}")

    # Variables (lam_1..lam_K, t).  sum(lam) <= 1 suffices because all
    # divergences are non-negative, so scaling lam up never hurts.
    A = np.zeros((len(others) + 1, K + 1))
    A[:-1, :K] = -rows
    A[:-1, K] = 1.0
    A[-1, :K] = 1.0
    b = np.zeros(len(others) + 1)
    b[-1] = 1.0
    c = np.zeros(K + 1)
    c[K] = 1.0
    res = simplex.maximize(c, A, b)
    lam = np.clip(res.x[:K], 0.0, None)
    lam = lam / lam.sum()
    value = float(_maxmin_objective(kl, i, lam[None, :])[0])
    meta = {"hypothesis": i, "iterations": res.iterations, "status": res.status, "lp_objective": res.objective}
    return Mixture(lam), value, meta


def solve_lambda(model: Model, i: int) -> tuple[Mixture, float]:
    """The max-min mixture for hypothesis ``i`` and its value D_i (nats)."""
    mix, value, _ = _solve(model, i, kl_table(model))
    return mix, value


def solve_design(model: Model) -> DesignSolution:
    kl = kl_table(model)
    lambdas, D, meta = [], [], []
    for i in range(model.num_hypotheses):
        mix, value, m = _solve(model, i, kl)
        lambdas.append(mix.weights)
        D.append(value)
        meta.append(m)
    lam = np.array(lambdas)
    beta, argmin = compute_beta(model, lam)
    return DesignSolution(model, lam, np.array(D), kl, beta, argmin, tuple(meta))


def simplex_grid(k: int, n: int) -> np.ndarray:
    """All points of the probability simplex in R^k with coordinates in (1/n)Z."""
    if k == 1:
        return np.ones((1, 1))
    # Stars and bars: k-1 bar positions among n + k - 1 slots.
    bars = np.array(list(combinations(range(n + k - 1), k - 1)))
    edges = np.hstack([np.full((len(bars), 1), -1), bars, np.full((len(bars), 1), n + k - 1)])
    counts = np.diff(edges, axis=1) - 1
    return counts / n


def brute_force_lambda(model: Model, i: int, grid_step: float) -> tuple[Mixture, float]:
    """Exhaustive search of the max-min objective over a simplex grid.

    The grid resolution is ``1/ceil(1/grid_step)``, never coarser than
    ``grid_step``.
    """
    K = model.num_actions
    if K > 4:
        raise TooManyActions(f"grid search supports at most 4 actions, model has {K}")
    if not 0.0 < grid_step <= 0.1:
        raise ParameterOutOfRange(f"grid_step must lie in (0, 0.1], got {grid_step}")
    _check_i(model, i)
    n = math.ceil(1.0 / grid_step - 1e-9)
    grid = simplex_grid(K, n)
    values = _maxmin_objective(kl_table(model), i, grid)
    best = int(np.argmax(values))
    w = grid[best] / grid[best].sum()
    return Mixture(w), float(values[best])


class BetaReport(NamedTuple):
    beta: float
    argmin: tuple[int, int, int]


def compute_beta(model: Model, lambdas: np.ndarray | Sequence[Mixture]) -> BetaReport:
    """Smallest mass any design mixture puts on the actions separating a pair.

    Returns the minimum of ``sum_{a in A_ij} lambda_k(a)`` over ``i != j``
    and all ``k``, together with the minimising ``(i, j, k)``.
    """
    lam = np.array([m.weights if isinstance(m, Mixture) else np.asarray(m, dtype=np.float64) for m in lambdas])
    M = model.num_hypotheses
    if lam.shape != (M, model.num_actions):
        raise IndexOutOfRange(f"expected {M} mixtures over {model.num_actions} actions, got shape {lam.shape}")
    mask = discrimination_mask(model)
    best = (math.inf, (0, 1, 0))
    for i in range(M):
        for j in range(M):
            if i == j:
                continue
            mass = lam[:, mask[i, j]].sum(axis=1)
            k = int(np.argmin(mass))
            if mass[k] < best[0]:
                best = (float(mass[k]), (i, j, k))
    return BetaReport(min(max(best[0], 0.0), 1.0), best[1])


def rho_bound(model: Model, i: int, j: int, s: float, eta: float, beta: float) -> float:
    """Per-step moment bound on exp(s * Z_ji) under the never-stopping sluggish policy."""
    if not 0.0 < s < 1.0:
        raise SOutOfRange(f"s must lie in (0, 1), got {s}")
    if not 0.0 < eta <= 1.0:
        raise ParameterOutOfRange(f"eta must lie in (0, 1], got {eta}")
    if not 0.0 < beta <= 1.0:
        raise ParameterOutOfRange(f"beta must lie in (0, 1], got {beta}")
    actions = np.flatnonzero(discrimination_mask(model)[i, j])
    if actions.size == 0:
        raise IndistinguishablePair(i, j)
    worst = max(chernoff_coefficient(model, i, j, int(a), s) for a in actions)
    eb = eta * beta
    return eb * worst + (1.0 - eb)


@dataclass(frozen=True)
class HypothesisBounds:
    hypothesis: int
    D: float
    lower_slope: float
    cost_slope: float
    error_ceiling: float
    gamma: float
    s_star: float | None


@dataclass(frozen=True)
class BoundReport:
    L: float
    eta: float
    g_max: float
    threshold: float
    per_hypothesis: tuple[HypothesisBounds, ...]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "L": self.L,
            "eta": self.eta,
            "g_max": self.g_max,
            "threshold": self.threshold,
            "per_hypothesis": [vars(h).copy() for h in self.per_hypothesis],
        }


def decay_rate(model: Model, i: int, eta: float, beta: float) -> tuple[float, float | None]:
    """Best exponent ``-ln max_{j != i} rho_ij(s)`` over the s grid, and its s.

    Returns ``(0.0, None)`` when ``beta == 0``: the bound is then vacuous.
    """
    if beta <= 0.0:
        return 0.0, None
    M = model.num_hypotheses
    best, s_best = -math.inf, None
    for s in S_GRID:
        worst = max(rho_bound(model, i, j, float(s), eta, beta) for j in range(M) if j != i)
        g = -math.log(worst)
        if g > best:
            best, s_best = g, float(s)
    return best, s_best


def theoretical_bounds(solution: DesignSolution, L: float, eta: float, g_max: float) -> BoundReport:
    if not L > 1.0:
        raise ParameterOutOfRange(f"L must exceed 1, got {L}")
    if not 0.0 < eta <= 1.0:
        raise ParameterOutOfRange(f"eta must lie in (0, 1], got {eta}")
    if g_max < 0.0:
        raise ParameterOutOfRange(f"g_max must be >= 0, got {g_max}")
    model = solution.model
    rows = []
    for i, d in enumerate(solution.D):
        gamma, s_star = decay_rate(model, i, eta, solution.beta)
        rows.append(
            HypothesisBounds(
                hypothesis=i,
                D=float(d),
                lower_slope=1.0 / d,
                cost_slope=(1.0 + g_max * eta) / d,
                error_ceiling=1.0 / L,
                gamma=gamma,
                s_star=s_star,
            )
        )
    threshold = math.log((model.num_hypotheses - 1) * L)
    return BoundReport(L, eta, g_max, threshold, tuple(rows))
