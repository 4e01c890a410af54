"""Monte Carlo orchestration.

Batches run ``trials`` independent trials for every (hypothesis, L) cell.
Trial ``t`` of cell ``(i, l)`` uses the stream keyed by
``(base_seed, i, l, t)``, so a cell's outcome does not depend on how the
trials were split across worker processes.  Aggregates are computed once
from the trial arrays in trial order, which keeps every float sum
bit-identical between runs.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .design import DesignSolution, theoretical_bounds
from .engine import DEFAULT_N_MAX, SwitchCostMatrix, TrialBatch, simulate
from .errors import (
    DesignMissing,
    InsufficientPoints,
    ParameterOutOfRange,
    ToleranceOutOfRange,
    TooFewSamples,
)
from .obs_models import Model
from .policies import PolicyConfig, PolicyKind
from .rng import trial_keys

Z95 = 1.959963984540054
MIN_CI_TRIALS = 100
DEFAULT_ETA_GRID = (1.0, 0.3, 0.1, 0.03)


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


@dataclass(frozen=True)
class ExperimentConfig:
    model: Model
    design: DesignSolution | None
    kind: PolicyKind = PolicyKind.SLUGGISH_A
    eta: float = 1.0
    epsilon: float = 0.0
    stop_at: int | None = None
    costs: SwitchCostMatrix | None = None
    L_grid: tuple[float, ...] = (1e2, 1e3, 1e4)
    trials: int = 1000
    base_seed: int = 0
    n_max: int = DEFAULT_N_MAX
    hypotheses: tuple[int, ...] | None = None
    fit_fraction: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        grid = tuple(float(v) for v in self.L_grid)
        if not grid:
            raise ParameterOutOfRange("L grid is empty")
        if any(v <= 1.0 for v in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ParameterOutOfRange(f"L grid must be strictly increasing and > 1, got {grid}")
        object.__setattr__(self, "L_grid", grid)
        if self.trials < 1:
            raise ParameterOutOfRange(f"trials must be >= 1, got {self.trials}")
        if self.costs is None:
            object.__setattr__(self, "costs", SwitchCostMatrix.zeros(self.model.num_actions))
        hyps = tuple(range(self.model.num_hypotheses)) if self.hypotheses is None else tuple(self.hypotheses)
        if any(not 0 <= h < self.model.num_hypotheses for h in hyps):
            raise ParameterOutOfRange(f"hypotheses {hyps} outside the model")
        object.__setattr__(self, "hypotheses", hyps)

    def policy_for(self, L: float) -> PolicyConfig:
        if self.design is None:
            raise DesignMissing("solve the design before simulating")
        return PolicyConfig(self.kind, self.design.lambdas, L=L, eta=self.eta, epsilon=self.epsilon, stop_at=self.stop_at)

    @property
    def effective_eta(self) -> float:
        return self.eta if self.kind.sluggish else 1.0

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_json_dict(),
            "policy": {"kind": self.kind.value, "eta": self.eta, "epsilon": self.epsilon, "stop_at": self.stop_at},
            "costs": self.costs.to_json_dict(),
            "L_grid": list(self.L_grid),
            "trials": self.trials,
            "base_seed": self.base_seed,
            "n_max": self.n_max,
            "hypotheses": list(self.hypotheses),
            "fit_fraction": self.fit_fraction,
        }


def config_hash(payload: dict[str, Any]) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float
    n: int

    @property
    def ci_valid(self) -> bool:
        return self.n >= MIN_CI_TRIALS and math.isfinite(self.se)

    @property
    def ci(self) -> tuple[float, float]:
        if not math.isfinite(self.se):
            return (math.nan, math.nan)
        return (self.mean - Z95 * self.se, self.mean + Z95 * self.se)

    @classmethod
    def of_mean(cls, values: np.ndarray) -> Estimate:
        n = int(values.size)
        if n == 0:
            return cls(math.nan, math.nan, 0)
        mean = float(values.mean())
        se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
        return cls(mean, se, n)

    @classmethod
    def of_proportion(cls, hits: int, n: int) -> Estimate:
        if n == 0:
            return cls(math.nan, math.nan, 0)
        p = hits / n
        se = math.sqrt(p * (1.0 - p) / n) if n > 1 else math.nan
        return cls(p, se, n)

    def to_json_dict(self) -> dict[str, Any]:
        lo, hi = self.ci
        return {"mean": self.mean, "se": self.se, "n": self.n, "ci95": [lo, hi], "ci_valid": self.ci_valid}


@dataclass(frozen=True)
class CellResult:
    hypothesis: int
    L: float
    L_index: int
    trials: int
    censored: int
    errors: int
    error_rate: Estimate
    tau: Estimate
    total_cost: Estimate
    switches: Estimate

    @property
    def censor_fraction(self) -> float:
        return self.censored / self.trials

    @classmethod
    def from_batch(cls, batch: TrialBatch, L: float, L_index: int) -> CellResult:
        ok = ~batch.censored
        errors = int(np.count_nonzero(batch.decision != batch.true_hypothesis))
        return cls(
            hypothesis=batch.true_hypothesis,
            L=L,
            L_index=L_index,
            trials=len(batch),
            censored=int(np.count_nonzero(batch.censored)),
            errors=errors,
            error_rate=Estimate.of_proportion(errors, len(batch)),
            tau=Estimate.of_mean(batch.tau[ok].astype(np.float64)),
            total_cost=Estimate.of_mean(batch.total_cost[ok]),
            switches=Estimate.of_mean(batch.switch_count[ok].astype(np.float64)),
        )

    def csv_row(self) -> dict[str, Any]:
        return {
            "hypothesis": self.hypothesis,
            "L": self.L,
            "ln_L": math.log(self.L),
            "trials": self.trials,
            "error_rate": self.error_rate.mean,
            "error_se": self.error_rate.se,
            "mean_tau": self.tau.mean,
            "tau_se": self.tau.se,
            "mean_total_cost": self.total_cost.mean,
            "total_cost_se": self.total_cost.se,
            "mean_switches": self.switches.mean,
            "switches_se": self.switches.se,
            "censor_fraction": self.censor_fraction,
            "ci_valid": int(self.tau.ci_valid),
        }


CELL_COLUMNS = (
    "hypothesis",
    "L",
    "ln_L",
    "trials",
    "error_rate",
    "error_se",
    "mean_tau",
    "tau_se",
    "mean_total_cost",
    "total_cost_se",
    "mean_switches",
    "switches_se",
    "censor_fraction",
    "ci_valid",
)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    n_points: int


def slope_fit(points: Sequence[tuple[float, float]], sigmas: Sequence[float] | None = None) -> SlopeFit:
    """Ordinary least squares of estimate against ln L.

    Without ``sigmas`` the standard error is the usual residual-based one
    (0 for two points).  With per-point standard errors of the estimates it
    is the propagated Monte Carlo error of the slope instead.
    """
    if len(points) < 2:
        raise InsufficientPoints(f"need at least 2 points, got {len(points)}")
    x = np.array([p[0] for p in points], dtype=np.float64)
    y = np.array([p[1] for p in points], dtype=np.float64)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise InsufficientPoints("all x values coincide")
    slope = float(xc @ (y - y.mean()) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    if sigmas is not None:
        s = np.asarray(sigmas, dtype=np.float64)
        stderr = float(np.sqrt(np.sum((xc / sxx) ** 2 * s**2)))
    elif len(points) > 2:
        resid = y - (intercept + slope * x)
        stderr = float(math.sqrt(resid @ resid / (len(points) - 2) / sxx))
    else:
        stderr = 0.0
    return SlopeFit(slope, intercept, stderr, len(points))


def fit_window(L_grid: Sequence[float], fraction: float = 0.5) -> list[int]:
    """Indices of the largest ``ceil(fraction * n)`` grid values (at least 2)."""
    n = len(L_grid)
    k = min(n, max(2, math.ceil(fraction * n)))
    return list(range(n - k, n))


@dataclass(frozen=True)
class HypothesisSummary:
    hypothesis: int
    D: float
    tau_fit: SlopeFit | None
    cost_fit: SlopeFit | None
    lower_slope: float
    cost_ceiling: float
    epsilon_reference: float | None


@dataclass(frozen=True)
class BatchResult:
    config_hash: str
    cells: tuple[CellResult, ...]
    summaries: tuple[HypothesisSummary, ...]
    g_max: float
    eta: float

    def cell(self, hypothesis: int, L: float) -> CellResult:
        for c in self.cells:
            if c.hypothesis == hypothesis and c.L == L:
                return c
        raise KeyError((hypothesis, L))

    def summary(self, hypothesis: int) -> HypothesisSummary:
        for s in self.summaries:
            if s.hypothesis == hypothesis:
                return s
        raise KeyError(hypothesis)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "g_max": self.g_max,
            "eta": self.eta,
            "cells": [
                {
                    "hypothesis": c.hypothesis,
                    "L": c.L,
                    "trials": c.trials,
                    "censored": c.censored,
                    "errors": c.errors,
                    "error_rate": c.error_rate.to_json_dict(),
                    "tau": c.tau.to_json_dict(),
                    "total_cost": c.total_cost.to_json_dict(),
                    "switches": c.switches.to_json_dict(),
                }
                for c in self.cells
            ],
            "slopes": [
                {
                    "hypothesis": s.hypothesis,
                    "D": s.D,
                    "tau_fit": None if s.tau_fit is None else asdict(s.tau_fit),
                    "cost_fit": None if s.cost_fit is None else asdict(s.cost_fit),
                    "reference_lower_slope": s.lower_slope,
                    "reference_cost_ceiling": s.cost_ceiling,
                    "reference_epsilon_slope": s.epsilon_reference,
                }
                for s in self.summaries
            ],
        }


def _simulate_chunk(args: tuple) -> TrialBatch:
    model, policy, costs, hyp, keys, ids, n_max, level = args
    return simulate(model, policy, costs, hyp, keys, n_max, margin_level=level, trial_ids=ids)


def _chunks(n: int, workers: int) -> list[np.ndarray]:
    if workers <= 1 or n < 2 * workers:
        return [np.arange(n)]
    return [c for c in np.array_split(np.arange(n), workers) if c.size]


def run_trials(
    model: Model,
    policy: PolicyConfig,
    costs: SwitchCostMatrix,
    hypothesis: int,
    *,
    trials: int,
    base_seed: int,
    cell: int = 0,
    n_max: int = DEFAULT_N_MAX,
    margin_level: float | None = None,
    workers: int = 1,
) -> TrialBatch:
    """Simulate one cell, optionally across worker processes."""
    keys = trial_keys(base_seed, hypothesis, cell, np.arange(trials))
    jobs = [(model, policy, costs, hypothesis, keys[c], c, n_max, margin_level) for c in _chunks(trials, workers)]
    if len(jobs) == 1:
        return _simulate_chunk(jobs[0])
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_simulate_chunk, jobs))
    return TrialBatch.concat(parts)


def run_batch(config: ExperimentConfig, workers: int = 1) -> BatchResult:
    if config.design is None:
        raise DesignMissing("ExperimentConfig.design is required; solve the design first")
    design = config.design
    cells = []
    for i in config.hypotheses:
        for l, L in enumerate(config.L_grid):
            batch = run_trials(
                config.model,
                config.policy_for(L),
                config.costs,
                i,
                trials=config.trials,
                base_seed=config.base_seed,
                cell=l,
                n_max=config.n_max,
                workers=workers,
            )
            cells.append(CellResult.from_batch(batch, L, l))

    g_max = config.costs.g_max
    eta = config.effective_eta
    window = fit_window(config.L_grid, config.fit_fraction) if len(config.L_grid) >= 2 else []
    summaries = []
    for i in config.hypotheses:
        D = float(design.D[i])
        mine = [c for c in cells if c.hypothesis == i and c.L_index in window]
        tau_fit = cost_fit = None
        usable = [c for c in mine if c.tau.n >= 2]
        if len(usable) >= 2:
            xs = [math.log(c.L) for c in usable]
            tau_fit = slope_fit(list(zip(xs, [c.tau.mean for c in usable])), [c.tau.se for c in usable])
            cost_fit = slope_fit(
                list(zip(xs, [c.total_cost.mean for c in usable])), [c.total_cost.se for c in usable]
            )
        eps_ref = None
        if config.kind is PolicyKind.EPSILON_UNIFORM:
            eps_ref = 1.0 / ((1.0 - config.epsilon) * D)
        summaries.append(
            HypothesisSummary(
                hypothesis=i,
                D=D,
                tau_fit=tau_fit,
                cost_fit=cost_fit,
                lower_slope=1.0 / D,
                cost_ceiling=(1.0 + g_max * eta) / D,
                epsilon_reference=eps_ref,
            )
        )
    return BatchResult(config_hash(config.to_json_dict()), tuple(cells), tuple(summaries), g_max, eta)


# ---------------------------------------------------------------------------
# Tail diagnostics


@dataclass(frozen=True)
class TailFit:
    kind: str
    slope: float
    intercept: float
    stderr: float
    n_points: int
    n_samples: int
    degenerate: bool = False

    @property
    def decay(self) -> float:
        return -self.slope


def fit_log_tail(probs: np.ndarray, n_samples: int, kind: str, min_count: int = 10) -> TailFit:
    """Fit ln P(n) against n over the steps where P(n) >= min_count / n_samples."""
    probs = np.asarray(probs, dtype=np.float64)
    floor = min_count / n_samples
    steps = np.flatnonzero(probs >= floor)
    if steps.size < 3:
        raise TooFewSamples(
            f"{kind}: only {steps.size} steps have tail probability >= {floor:g}; need 3"
        )
    fit = slope_fit(list(zip(steps.astype(float), np.log(probs[steps]))))
    return TailFit(kind, fit.slope, fit.intercept, fit.stderr, fit.n_points, n_samples)


def tail_diagnostic(samples: np.ndarray, kind: str, k_const: float = 0.0, min_count: int = 10) -> TailFit:
    """Exponential-tail fit for settlement times or margin paths.

    ``kind="T_i_tail"``: ``samples`` are settlement times; fits ln P(T > n).
    ``kind="margin_tail"``: ``samples`` is a (trials x steps) array of
    ``min_j Z_ij(n)`` paths; fits ln P(min_j Z_ij(n) <= k_const).
    """
    samples = np.asarray(samples)
    if kind == "T_i_tail":
        t = samples.astype(np.int64).ravel()
        if t.size == 0:
            raise TooFewSamples("no settlement samples")
        if t.max() == 0:
            return TailFit(kind, -math.inf, 0.0, 0.0, 0, t.size, degenerate=True)
        probs = settlement_survival(t)
        return fit_log_tail(probs, t.size, kind, min_count)
    if kind == "margin_tail":
        paths = np.atleast_2d(samples.astype(np.float64))
        probs = (paths <= k_const).mean(axis=0)
        return fit_log_tail(probs, paths.shape[0], kind, min_count)
    raise ParameterOutOfRange(f"unknown tail kind {kind!r}")


def settlement_survival(t: np.ndarray) -> np.ndarray:
    """P(T > n) for n = 0..max(t)."""
    counts = np.bincount(t)
    return 1.0 - np.cumsum(counts) / t.size


@dataclass(frozen=True)
class DiagnosticReport:
    hypothesis: int
    eta: float
    horizon: int
    trials: int
    gamma: float
    s_star: float | None
    margin_fit: TailFit | None
    settlement_fit: TailFit | None
    notes: tuple[str, ...] = ()

    def passes(self, fit: TailFit | None) -> bool | None:
        if fit is None:
            return None
        if fit.degenerate:
            return True
        return fit.slope < 0 and -fit.slope >= self.gamma - 2.0 * fit.stderr

    def to_json_dict(self) -> dict[str, Any]:
        def f(fit: TailFit | None) -> dict[str, Any] | None:
            if fit is None:
                return None
            d = asdict(fit)
            d["decay"] = fit.decay
            d["at_least_analytic"] = self.passes(fit)
            return d

        return {
            "hypothesis": self.hypothesis,
            "eta": self.eta,
            "horizon": self.horizon,
            "trials": self.trials,
            "analytic_gamma": self.gamma,
            "s_star": self.s_star,
            "margin_tail": f(self.margin_fit),
            "settlement_tail": f(self.settlement_fit),
            "notes": list(self.notes),
        }


def run_diagnostics(
    model: Model,
    design: DesignSolution,
    hypothesis: int,
    *,
    eta: float,
    horizon: int,
    trials: int,
    base_seed: int,
    k_const: float = 0.0,
    workers: int = 1,
) -> DiagnosticReport:
    """Never-stopping runs: empirical margin and settlement tails vs the analytic rate."""
    if horizon < 1:
        raise ParameterOutOfRange(f"horizon must be >= 1, got {horizon}")
    policy = PolicyConfig(PolicyKind.NON_STOPPING, design.lambdas, eta=eta)
    batch = run_trials(
        model,
        policy,
        SwitchCostMatrix.zeros(model.num_actions),
        hypothesis,
        trials=trials,
        base_seed=base_seed,
        n_max=horizon,
        margin_level=k_const,
        workers=workers,
    )
    bounds = theoretical_bounds(design, L=math.e, eta=eta, g_max=0.0).per_hypothesis[hypothesis]
    notes = []
    if design.beta <= 0.0:
        notes.append("beta = 0: the analytic decay bound is vacuous for this design")
    margin_fit = settlement_fit = None
    try:
        margin_fit = fit_log_tail(batch.margin_hits / trials, trials, "margin_tail")
    except TooFewSamples as exc:
        notes.append(f"TooFewSamples: {exc}")
    try:
        t = batch.settlement_time
        if t.max() == 0:
            settlement_fit = TailFit("T_i_tail", -math.inf, 0.0, 0.0, 0, t.size, degenerate=True)
        else:
            settlement_fit = fit_log_tail(settlement_survival(t), t.size, "T_i_tail")
    except TooFewSamples as exc:
        notes.append(f"TooFewSamples: {exc}")
    return DiagnosticReport(
        hypothesis, eta, horizon, trials, bounds.gamma, bounds.s_star, margin_fit, settlement_fit, tuple(notes)
    )


# ---------------------------------------------------------------------------
# Tolerance sweep


@dataclass(frozen=True)
class ToleranceCheck:
    alpha: tuple[float, ...]
    L: float
    ratio: float
    eta: float
    error_rates: tuple[float, ...]
    ceilings: tuple[float, ...]

    @property
    def satisfied(self) -> bool:
        return all(e <= c for e, c in zip(self.error_rates, self.ceilings))


@dataclass(frozen=True)
class SweepReport:
    checks: tuple[ToleranceCheck, ...]
    batches: dict[float, BatchResult] = field(repr=False)

    def cost_slopes(self, hypothesis: int) -> list[tuple[float, SlopeFit | None, float]]:
        """(eta, fitted cost slope, ceiling (1 + g_max eta)/D_i) in eta-grid order."""
        out = []
        for eta, res in self.batches.items():
            s = res.summary(hypothesis)
            out.append((eta, s.cost_fit, s.cost_ceiling))
        return out

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "checks": [
                {
                    "alpha": list(c.alpha),
                    "L": c.L,
                    "max_over_min": c.ratio,
                    "eta": c.eta,
                    "error_rates": list(c.error_rates),
                    "ceilings": list(c.ceilings),
                    "satisfied": c.satisfied,
                }
                for c in self.checks
            ],
            "batches": {str(eta): res.to_json_dict() for eta, res in self.batches.items()},
        }


def tolerance_sweep(
    config: ExperimentConfig,
    alpha_sequence: Sequence[Sequence[float]],
    eta_grid: Sequence[float] = DEFAULT_ETA_GRID,
    workers: int = 1,
) -> SweepReport:
    """Run the policy at L = 1 / min_k alpha_k for each tolerance vector.

    Each component's empirical error rate is checked against
    ``alpha_k + 3 sqrt(alpha_k (1 - alpha_k) / N)``; cost slopes are fitted per eta.
    """
    M = config.model.num_hypotheses
    alphas = []
    for vec in alpha_sequence:
        a = tuple(float(v) for v in vec)
        if len(a) != M or any(not 0.0 < v < 1.0 for v in a):
            raise ToleranceOutOfRange(f"tolerance vector {a} must have {M} components in (0, 1)")
        alphas.append(a)
    if not alphas:
        raise ToleranceOutOfRange("empty tolerance sequence")
    Ls = sorted({1.0 / min(a) for a in alphas})
    N = config.trials
    checks, batches = [], {}
    for eta in eta_grid:
        res = run_batch(replace(config, eta=float(eta), L_grid=tuple(Ls)), workers=workers)
        batches[float(eta)] = res
        for a in alphas:
            L = 1.0 / min(a)
            rates = tuple(res.cell(k, L).error_rate.mean if k in config.hypotheses else math.nan for k in range(M))
            ceil = tuple(ak + 3.0 * math.sqrt(ak * (1.0 - ak) / N) for ak in a)
            rates_ok = tuple(0.0 if math.isnan(r) else r for r in rates)
            checks.append(ToleranceCheck(a, L, max(a) / min(a), float(eta), rates_ok, ceil))
    return SweepReport(tuple(checks), batches)
