"""Trial simulation.

``run_trial`` is the reference loop: it asks the policy for a composite
action, pays the switching cost, draws an observation from the true
hypothesis and adds ``ln q_i^a(x)`` to every ``Z[i]``.

``simulate`` runs a whole block of trials in lockstep with numpy.  It reads
the same ``(key, step, slot)`` uniforms and performs the same floating point
operations in the same order, so its records equal ``run_trial``'s field for
field; the test suite checks this directly.

Time convention: ``tau`` is the number of observations taken before the
stop decision, so the switching cost sums over ``tau - 1`` transitions.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from . import rng as rngmod
from .errors import ParameterOutOfRange
from .obs_models import Model
from .policies import (
    TIE_TOL,
    Continue,
    PolicyConfig,
    PolicyKind,
    PolicyState,
    leader,
    margin,
    mixture_cdf,
    next_composite_action,
    resample_draw,
    sample_index,
)
from .rng import TrialStream

DEFAULT_N_MAX = 10_000_000
RECENTER_EVERY = 10_000

CSV_COLUMNS = (
    "trial_id",
    "true_hyp",
    "decision",
    "tau",
    "switch_count",
    "switch_cost",
    "total_cost",
    "censored",
    "settlement_time",
    "final_margin",
)


@dataclass(frozen=True, eq=False)
class SwitchCostMatrix:
    g: np.ndarray

    def __post_init__(self) -> None:
        g = np.array(self.g, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ParameterOutOfRange(f"switch cost matrix must be square, got shape {g.shape}")
        if np.any(~np.isfinite(g)) or np.any(g < 0):
            raise ParameterOutOfRange("switch costs must be finite and non-negative")
        if np.any(np.diag(g) != 0):
            raise ParameterOutOfRange("staying on the same action must cost 0")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @classmethod
    def zeros(cls, k: int) -> SwitchCostMatrix:
        return cls(np.zeros((k, k)))

    @classmethod
    def uniform(cls, k: int, cost: float) -> SwitchCostMatrix:
        return cls(cost * (1.0 - np.eye(k)))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SwitchCostMatrix) and np.array_equal(self.g, other.g)

    def __hash__(self) -> int:
        return hash(self.g.tobytes())

    @property
    def g_max(self) -> float:
        return float(self.g.max())

    @property
    def num_actions(self) -> int:
        return self.g.shape[0]

    def to_json_dict(self) -> dict[str, Any]:
        return {"g": self.g.tolist()}


@dataclass(frozen=True)
class TrialRecord:
    true_hypothesis: int
    decision: int | None
    tau: int
    switch_count: int
    switch_cost: float
    total_cost: float
    censored: bool
    action_counts: tuple[int, ...]
    settlement_time: int | None
    final_margin: float
    resample_count: int = 0

    def csv_row(self, trial_id: int) -> list[Any]:
        return [
            trial_id,
            self.true_hypothesis,
            "" if self.decision is None else self.decision,
            self.tau,
            self.switch_count,
            repr(self.switch_cost),
            repr(self.total_cost),
            int(self.censored),
            "" if self.settlement_time is None else self.settlement_time,
            repr(self.final_margin),
        ]


def total_cost(record: TrialRecord) -> float:
    return record.tau + record.switch_cost


def _check_inputs(model: Model, config: PolicyConfig, costs: SwitchCostMatrix, true_hyp: int, n_max: int) -> None:
    if config.lambdas.shape != (model.num_hypotheses, model.num_actions):
        raise ParameterOutOfRange("policy design table does not match the model")
    if costs.num_actions != model.num_actions:
        raise ParameterOutOfRange("switch cost matrix does not match the model's action count")
    if not 0 <= true_hyp < model.num_hypotheses:
        raise ParameterOutOfRange(f"true hypothesis {true_hyp} outside [0, {model.num_hypotheses})")
    if n_max < 1:
        raise ParameterOutOfRange(f"n_max must be >= 1, got {n_max}")


def _top_margin(Z: np.ndarray) -> float:
    return margin(Z, int(np.argmax(Z)))


def run_trial(
    model: Model,
    config: PolicyConfig,
    costs: SwitchCostMatrix,
    true_hyp: int,
    rng: TrialStream,
    n_max: int = DEFAULT_N_MAX,
) -> TrialRecord:
    _check_inputs(model, config, costs, true_hyp, n_max)
    logq = model.log_pmf
    obs_cdf = [mixture_cdf(model.pmf[true_hyp, a]).tolist() for a in range(model.num_actions)]
    g = costs.g
    Z = np.zeros(model.num_hypotheses)
    prev: int | None = None
    n = 0
    switches = 0
    resamples = 0
    switch_cost = 0.0
    counts = [0] * model.num_actions
    last_disagree = -1

    while n < n_max:
        state = PolicyState(Z, prev, n)
        if leader(state, rng) != true_hyp:
            last_disagree = n
        act = next_composite_action(config, state, rng)
        if not isinstance(act, Continue):
            return TrialRecord(
                true_hypothesis=true_hyp,
                decision=act.decision,
                tau=n,
                switch_count=switches,
                switch_cost=switch_cost,
                total_cost=n + switch_cost,
                censored=False,
                action_counts=tuple(counts),
                settlement_time=last_disagree + 1,
                final_margin=margin(Z, act.decision),
                resample_count=resamples,
            )
        a = act.action
        if config.kind.sluggish and prev is not None and resample_draw(config, state, rng):
            resamples += 1
        if prev is not None:
            switch_cost += float(g[prev, a])
            switches += a != prev
        x = sample_index(obs_cdf[a], rng.uniform(n, rngmod.OBSERVATION))
        Z = Z + logq[:, a, x]
        counts[a] += 1
        prev = a
        n += 1
        if n % RECENTER_EVERY == 0:
            Z = Z - Z.max()

    return TrialRecord(
        true_hypothesis=true_hyp,
        decision=None,
        tau=n,
        switch_count=switches,
        switch_cost=switch_cost,
        total_cost=n + switch_cost,
        censored=True,
        action_counts=tuple(counts),
        settlement_time=last_disagree + 1,
        final_margin=_top_margin(Z),
        resample_count=resamples,
    )


def llr_trace(
    model: Model, config: PolicyConfig, true_hyp: int, rng: TrialStream, n_max: int
) -> np.ndarray:
    """Margin process ``min_{j != i} Z_ij(n)`` for n = 0..n_max, i the true hypothesis."""
    if config.kind is not PolicyKind.NON_STOPPING:
        raise ParameterOutOfRange("llr_trace runs the never-stopping policy")
    costs = SwitchCostMatrix.zeros(model.num_actions)
    _check_inputs(model, config, costs, true_hyp, n_max)
    logq = model.log_pmf
    obs_cdf = [mixture_cdf(model.pmf[true_hyp, a]).tolist() for a in range(model.num_actions)]
    Z = np.zeros(model.num_hypotheses)
    prev: int | None = None
    out = np.empty(n_max + 1)
    for n in range(n_max):
        out[n] = margin(Z, true_hyp)
        a = next_composite_action(config, PolicyState(Z, prev, n), rng).action
        x = sample_index(obs_cdf[a], rng.uniform(n, rngmod.OBSERVATION))
        Z = Z + logq[:, a, x]
        prev = a
        if (n + 1) % RECENTER_EVERY == 0:
            Z = Z - Z.max()
    out[n_max] = margin(Z, true_hyp)
    return out


# ---------------------------------------------------------------------------
# Vectorised engine


@dataclass
class TrialBatch:
    """Struct-of-arrays outcome of :func:`simulate`; ``decision`` is -1 when censored."""

    true_hypothesis: int
    decision: np.ndarray
    tau: np.ndarray
    switch_count: np.ndarray
    switch_cost: np.ndarray
    censored: np.ndarray
    action_counts: np.ndarray
    settlement_time: np.ndarray
    final_margin: np.ndarray
    resample_count: np.ndarray
    horizon: int
    # margin_hits[n] = #trials with min_j Z_ij(n) <= level at step n (n = 0..horizon).
    margin_hits: np.ndarray | None = None
    trial_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.tau.size)

    @property
    def total_cost(self) -> np.ndarray:
        return self.tau + self.switch_cost

    def record(self, t: int) -> TrialRecord:
        d = int(self.decision[t])
        tau = int(self.tau[t])
        sc = float(self.switch_cost[t])
        return TrialRecord(
            true_hypothesis=self.true_hypothesis,
            decision=None if d < 0 else d,
            tau=tau,
            switch_count=int(self.switch_count[t]),
            switch_cost=sc,
            total_cost=tau + sc,
            censored=bool(self.censored[t]),
            action_counts=tuple(int(c) for c in self.action_counts[t]),
            settlement_time=int(self.settlement_time[t]),
            final_margin=float(self.final_margin[t]),
            resample_count=int(self.resample_count[t]),
        )

    def records(self) -> Iterable[TrialRecord]:
        return (self.record(t) for t in range(len(self)))

    @classmethod
    def concat(cls, parts: list[TrialBatch]) -> TrialBatch:
        first = parts[0]
        hits = None
        if first.margin_hits is not None:
            hits = np.sum([p.margin_hits for p in parts], axis=0)
        return cls(
            true_hypothesis=first.true_hypothesis,
            decision=np.concatenate([p.decision for p in parts]),
            tau=np.concatenate([p.tau for p in parts]),
            switch_count=np.concatenate([p.switch_count for p in parts]),
            switch_cost=np.concatenate([p.switch_cost for p in parts]),
            censored=np.concatenate([p.censored for p in parts]),
            action_counts=np.concatenate([p.action_counts for p in parts]),
            settlement_time=np.concatenate([p.settlement_time for p in parts]),
            final_margin=np.concatenate([p.final_margin for p in parts]),
            resample_count=np.concatenate([p.resample_count for p in parts]),
            horizon=first.horizon,
            margin_hits=hits,
            trial_ids=np.concatenate([p.trial_ids for p in parts]),
        )

    def to_csv(self, header: Iterable[str] = ()) -> str:
        buf = io.StringIO()
        for line in header:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        ids = self.trial_ids if self.trial_ids.size == len(self) else np.arange(len(self))
        for t, rec in enumerate(self.records()):
            w.writerow(rec.csv_row(int(ids[t])))
        return buf.getvalue()


def _grouped_search(cdfs: list[np.ndarray], rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-trial inverse-CDF draw from row ``rows[t]``; matches ``sample_index``."""
    out = np.empty(u.size, dtype=np.int64)
    for r in np.unique(rows):
        sel = rows == r
        c = cdfs[r]
        out[sel] = np.minimum(np.searchsorted(c, u[sel], side="right"), c.size - 1)
    return out


def _second_max(Z: np.ndarray) -> np.ndarray:
    return np.partition(Z, -2, axis=1)[:, -2]


def simulate(
    model: Model,
    config: PolicyConfig,
    costs: SwitchCostMatrix,
    true_hyp: int,
    keys: np.ndarray,
    n_max: int = DEFAULT_N_MAX,
    *,
    margin_level: float | None = None,
    trial_ids: np.ndarray | None = None,
) -> TrialBatch:
    """Run one trial per key in lockstep.

    With ``margin_level`` set, also counts at every step how many trials have
    ``min_{j != true} Z_true,j <= margin_level`` (the empirical margin tail).
    """
    _check_inputs(model, config, costs, true_hyp, n_max)
    keys = np.asarray(keys, dtype=np.uint64)
    N = keys.size
    M, K = model.num_hypotheses, model.num_actions
    kind = config.kind
    logq_by_action = [np.ascontiguousarray(model.log_pmf[:, a, :].T) for a in range(K)]  # [x, i]
    obs_cdfs = [mixture_cdf(model.pmf[true_hyp, a]) for a in range(K)]
    lam_cdfs = [mixture_cdf(config.lambdas[i]) for i in range(M)]
    g = costs.g
    thr = config.threshold if kind is not PolicyKind.NON_STOPPING else math.inf
    others = [j for j in range(M) if j != true_hyp]

    Z = np.zeros((N, M))
    prev = np.full(N, -1, dtype=np.int64)
    decision = np.full(N, -1, dtype=np.int64)
    tau = np.zeros(N, dtype=np.int64)
    switches = np.zeros(N, dtype=np.int64)
    resamples = np.zeros(N, dtype=np.int64)
    switch_cost = np.zeros(N)
    counts = np.zeros((N, K), dtype=np.int64)
    last_dis = np.full(N, -1, dtype=np.int64)
    final_margin = np.zeros(N)
    censored = np.zeros(N, dtype=bool)
    hits = np.zeros(n_max + 1, dtype=np.int64) if margin_level is not None else None

    idx = np.arange(N)
    n = 0
    while idx.size and n < n_max:
        Za = Z[idx]
        ka = keys[idx]
        if hits is not None:
            m_true = Za[:, true_hyp] - Za[:, others].max(axis=1)
            hits[n] = int(np.count_nonzero(m_true <= margin_level))

        # Leader with uniform tie-break.
        top = Za.max(axis=1)
        tied = Za >= (top - TIE_TOL)[:, None]
        ntied = tied.sum(axis=1)
        theta = np.argmax(tied, axis=1)
        multi = ntied > 1
        if multi.any():
            u = rngmod.uniform_array(ka[multi], n, rngmod.TIE)
            k = (u * ntied[multi]).astype(np.int64)
            theta[multi] = np.argmax(np.cumsum(tied[multi], axis=1) > k[:, None], axis=1)
        dis = theta != true_hyp
        last_dis[idx[dis]] = n

        # Stopping rule.
        if kind is not PolicyKind.NON_STOPPING:
            if kind is PolicyKind.STOP_ONLY_AT:
                s = config.stop_at
                rest = [j for j in range(M) if j != s]
                marg = Za[:, s] - Za[:, rest].max(axis=1)
                dec = np.full(idx.size, s, dtype=np.int64)
            else:
                dec = np.argmax(Za, axis=1)
                marg = top - _second_max(Za)
            stop = marg >= thr
            if stop.any():
                done = idx[stop]
                decision[done] = dec[stop]
                tau[done] = n
                final_margin[done] = marg[stop]
                keep = ~stop
                idx, Za, ka, theta = idx[keep], Za[keep], ka[keep], theta[keep]
                if not idx.size:
                    break

        # Action selection.
        pa = prev[idx]
        if kind is PolicyKind.EPSILON_UNIFORM:
            a = _grouped_search(lam_cdfs, theta, rngmod.uniform_array(ka, n, rngmod.ACTION))
            explore = rngmod.uniform_array(ka, n, rngmod.EXPLORE) < config.epsilon
            if explore.any():
                uu = rngmod.uniform_array(ka[explore], n, rngmod.UNIFORM_ACTION)
                a[explore] = np.minimum((uu * K).astype(np.int64), K - 1)
        elif kind is PolicyKind.PROCEDURE_A or n == 0:
            a = _grouped_search(lam_cdfs, theta, rngmod.uniform_array(ka, n, rngmod.ACTION))
        else:
            redraw = rngmod.uniform_array(ka, n, rngmod.SWITCH) < config.eta
            resamples[idx[redraw]] += 1
            a = pa.copy()
            if redraw.any():
                a[redraw] = _grouped_search(
                    lam_cdfs, theta[redraw], rngmod.uniform_array(ka[redraw], n, rngmod.ACTION)
                )

        if n > 0:
            switch_cost[idx] += g[pa, a]
            switches[idx] += a != pa

        x = _grouped_search(obs_cdfs, a, rngmod.uniform_array(ka, n, rngmod.OBSERVATION))
        inc = np.empty((idx.size, M))
        for act in np.unique(a):
            sel = a == act
            inc[sel] = logq_by_action[act][x[sel]]
        Za = Za + inc
        counts[idx, a] += 1
        prev[idx] = a
        n += 1
        if n % RECENTER_EVERY == 0:
            Za = Za - Za.max(axis=1, keepdims=True)
        Z[idx] = Za

    if idx.size:
        censored[idx] = True
        tau[idx] = n
        Za = Z[idx]
        final_margin[idx] = Za.max(axis=1) - _second_max(Za)
    if hits is not None and idx.size and n == n_max:
        Za = Z[idx]
        m_true = Za[:, true_hyp] - Za[:, others].max(axis=1)
        hits[n] = int(np.count_nonzero(m_true <= margin_level))

    return TrialBatch(
        true_hypothesis=true_hyp,
        decision=decision,
        tau=tau,
        switch_count=switches,
        switch_cost=switch_cost,
        censored=censored,
        action_counts=counts,
        settlement_time=last_dis + 1,
        final_margin=final_margin,
        resample_count=resamples,
        horizon=n_max,
        margin_hits=hits,
        trial_ids=np.arange(N, dtype=np.int64) if trial_ids is None else np.asarray(trial_ids, dtype=np.int64),
    )
