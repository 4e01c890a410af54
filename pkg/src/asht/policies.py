"""Decision policies as pure functions of (config, state, stream).

Policies never see the true hypothesis; they act on the log-likelihood
vector ``Z``, the previous action and the step count.  Every random choice
reads a fixed ``(step, slot)`` address of the trial's stream, so two
policies run on the same stream are coupled sample path by sample path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Union

import numpy as np

from . import rng as rngmod
from .errors import MissingPrevAction, ParameterOutOfRange
from .rng import TrialStream

TIE_TOL = 1e-12


class PolicyKind(str, Enum):
    PROCEDURE_A = "procedure_a"
    SLUGGISH_A = "sluggish_a"
    STOP_ONLY_AT = "sluggish_a_stop_only_at"
    NON_STOPPING = "sluggish_a_non_stopping"
    EPSILON_UNIFORM = "epsilon_uniform"

    @property
    def sluggish(self) -> bool:
        return self in (PolicyKind.SLUGGISH_A, PolicyKind.STOP_ONLY_AT, PolicyKind.NON_STOPPING)


@dataclass(frozen=True, eq=False)
class PolicyConfig:
    kind: PolicyKind
    lambdas: np.ndarray = field(repr=False)
    L: float = math.e
    eta: float = 1.0
    epsilon: float = 0.0
    stop_at: int | None = None

    def __post_init__(self) -> None:
        kind = PolicyKind(self.kind)
        object.__setattr__(self, "kind", kind)
        lam = np.array(self.lambdas, dtype=np.float64)
        if lam.ndim != 2 or lam.shape[0] < 2:
            raise ParameterOutOfRange(f"lambdas must be an M x K table with M >= 2, got shape {lam.shape}")
        if np.any(lam < 0) or np.any(np.abs(lam.sum(axis=1) - 1.0) > 1e-9):
            raise ParameterOutOfRange("every lambda row must be a probability vector")
        lam.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)
        if kind is not PolicyKind.NON_STOPPING and not self.L > 1.0:
            raise ParameterOutOfRange(f"L must exceed 1, got {self.L}")
        if kind.sluggish and not 0.0 < self.eta <= 1.0:
            raise ParameterOutOfRange(f"eta must lie in (0, 1], got {self.eta}")
        if kind is PolicyKind.EPSILON_UNIFORM and not 0.0 < self.epsilon < 1.0:
            raise ParameterOutOfRange(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if kind is PolicyKind.STOP_ONLY_AT:
            if self.stop_at is None or not 0 <= self.stop_at < lam.shape[0]:
                raise ParameterOutOfRange(f"stop_at must name a hypothesis, got {self.stop_at}")

    def _key(self) -> tuple:
        return (self.kind, self.lambdas.shape, self.lambdas.tobytes(), self.L, self.eta, self.epsilon, self.stop_at)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PolicyConfig) and self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())

    @property
    def num_hypotheses(self) -> int:
        return self.lambdas.shape[0]

    @property
    def num_actions(self) -> int:
        return self.lambdas.shape[1]

    @property
    def threshold(self) -> float:
        """ln((M - 1) L) in nats."""
        return math.log((self.num_hypotheses - 1) * self.L)

    def to_json_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind.value}
        if self.kind is not PolicyKind.NON_STOPPING:
            out["L"] = self.L
        if self.kind.sluggish:
            out["eta"] = self.eta
        if self.kind is PolicyKind.EPSILON_UNIFORM:
            out["epsilon"] = self.epsilon
        if self.kind is PolicyKind.STOP_ONLY_AT:
            out["stop_at"] = self.stop_at
        return out

    @classmethod
    def from_json_dict(cls, data: dict[str, Any], lambdas: np.ndarray) -> PolicyConfig:
        return cls(
            kind=PolicyKind(data["kind"]),
            lambdas=lambdas,
            L=float(data.get("L", math.e)),
            eta=float(data.get("eta", 1.0)),
            epsilon=float(data.get("epsilon", 0.0)),
            stop_at=data.get("stop_at"),
        )


@dataclass(frozen=True)
class PolicyState:
    Z: np.ndarray
    prev_action: int | None = None
    n: int = 0

    @classmethod
    def initial(cls, num_hypotheses: int) -> PolicyState:
        return cls(np.zeros(num_hypotheses))

    def llr(self, i: int, j: int) -> float:
        return float(self.Z[i] - self.Z[j])


@dataclass(frozen=True)
class Continue:
    action: int


@dataclass(frozen=True)
class Stop:
    decision: int


CompositeAction = Union[Continue, Stop]


def leader(state: PolicyState, rng: TrialStream) -> int:
    """argmax of Z, ties (within 1e-12 nats) broken uniformly at random."""
    Z = state.Z
    top = max(Z)
    tied = [i for i in range(len(Z)) if Z[i] >= top - TIE_TOL]
    if len(tied) == 1:
        return tied[0]
    return tied[int(rng.uniform(state.n, rngmod.TIE) * len(tied))]


def margin(Z: np.ndarray, i: int) -> float:
    """min_{j != i} Z[i] - Z[j]."""
    return float(Z[i] - max(Z[j] for j in range(len(Z)) if j != i))


def stop_check(state: PolicyState, threshold: float, only: int | None = None) -> int | None:
    """Hypothesis to declare, or None to keep sampling.

    With ``only`` set the test can only ever retire at that hypothesis.
    A positive threshold makes the leader's tie-break irrelevant here: any
    tie at the top gives margin 0.
    """
    if only is not None:
        return only if margin(state.Z, only) >= threshold else None
    i = int(np.argmax(state.Z))
    return i if margin(state.Z, i) >= threshold else None


def sample_index(cdf: list[float], u: float) -> int:
    """Inverse-CDF draw; ``cdf`` ends at exactly 1.0."""
    for k, c in enumerate(cdf):
        if u < c:
            return k
    return len(cdf) - 1


def mixture_cdf(weights: np.ndarray) -> np.ndarray:
    """Cumulative sums with everything from the last positive weight pinned to 1.0.

    Pinning keeps rounding from ever selecting a zero-weight trailing entry.
    """
    w = np.asarray(weights, dtype=np.float64)
    c = np.cumsum(w)
    last = int(np.flatnonzero(w > 0)[-1])
    c[last:] = 1.0
    return c


def resample_draw(config: PolicyConfig, state: PolicyState, rng: TrialStream) -> bool:
    """The Bernoulli(eta) gate of the sluggish policies (True means resample)."""
    return rng.uniform(state.n, rngmod.SWITCH) < config.eta


def _design_draw(config: PolicyConfig, theta: int, state: PolicyState, rng: TrialStream) -> int:
    cdf = mixture_cdf(config.lambdas[theta]).tolist()
    return sample_index(cdf, rng.uniform(state.n, rngmod.ACTION))


def next_composite_action(config: PolicyConfig, state: PolicyState, rng: TrialStream) -> CompositeAction:
    kind = config.kind
    if kind is not PolicyKind.NON_STOPPING:
        only = config.stop_at if kind is PolicyKind.STOP_ONLY_AT else None
        decision = stop_check(state, config.threshold, only)
        if decision is not None:
            return Stop(decision)

    theta = leader(state, rng)
    if kind is PolicyKind.PROCEDURE_A:
        return Continue(_design_draw(config, theta, state, rng))
    if kind is PolicyKind.EPSILON_UNIFORM:
        if rng.uniform(state.n, rngmod.EXPLORE) < config.epsilon:
            K = config.num_actions
            return Continue(min(int(rng.uniform(state.n, rngmod.UNIFORM_ACTION) * K), K - 1))
        return Continue(_design_draw(config, theta, state, rng))

    # Sluggish family.
    if state.n == 0 and state.prev_action is None:
        return Continue(_design_draw(config, theta, state, rng))
    if state.prev_action is None:
        raise MissingPrevAction(f"sluggish policy at step {state.n} needs the previous action")
    if resample_draw(config, state, rng):
        return Continue(_design_draw(config, theta, state, rng))
    return Continue(state.prev_action)


def transition_matrix(theta: int, eta: float, lambdas: np.ndarray) -> np.ndarray:
    """Action-chain kernel (1 - eta) I + eta 1 lambda_theta^T while ``theta`` leads."""
    if not 0.0 < eta <= 1.0:
        raise ParameterOutOfRange(f"eta must lie in (0, 1], got {eta}")
    lam = np.asarray(lambdas, dtype=np.float64)[theta]
    K = lam.size
    return (1.0 - eta) * np.eye(K) + eta * np.outer(np.ones(K), lam)
