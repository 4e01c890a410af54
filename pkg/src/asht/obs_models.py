"""Hypotheses, actions and finite observation distributions.

A model is a table ``pmf[i, a, x]`` of strictly positive probability vectors:
the law of one observation under hypothesis ``i`` when action ``a`` is taken.
All information quantities are in nats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    IndistinguishablePair,
    NonStochastic,
    SameHypothesis,
    SOutOfRange,
    ZeroMass,
)

SUM_TOL = 1e-12
MASS_FLOOR = 1e-12
# A_ij membership threshold, shared with the design module.
KL_POSITIVE_TOL = 1e-12


def _check_pmf(p: np.ndarray, what: str) -> None:
    if np.any(~np.isfinite(p)) or np.any(p < MASS_FLOOR):
        raise ZeroMass(f"{what}: entries must be finite and >= {MASS_FLOOR:g}, got {p.tolist()}")
    total = float(p.sum())
    if abs(total - 1.0) > SUM_TOL:
        raise NonStochastic(f"{what}: sums to {total!r}, not 1")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Model:
    """Immutable observation model.

    Construction enforces the per-pmf invariants (shape, positivity,
    normalisation).  The pairwise distinguishability check lives in
    :func:`validate_model`, so a zero-information model can still be built
    for experiments that need one.
    """

    pmf: np.ndarray
    hypotheses: tuple[str, ...] = ()
    actions: tuple[str, ...] = ()
    log_pmf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        pmf = np.asarray(self.pmf, dtype=np.float64)
        if pmf.ndim != 3:
            raise DimensionMismatch(f"pmf must be 3-D [hypothesis][action][symbol], got shape {pmf.shape}")
        M, K, S = pmf.shape
        if M < 2 or K < 1 or S < 2:
            raise DimensionMismatch(f"need M >= 2, K >= 1, S >= 2; got M={M}, K={K}, S={S}")
        for i in range(M):
            for a in range(K):
                _check_pmf(pmf[i, a], f"pmf[{i}][{a}]")
        hyps = tuple(self.hypotheses) or tuple(f"H{i + 1}" for i in range(M))
        acts = tuple(self.actions) or tuple(f"a{a + 1}" for a in range(K))
        if len(hyps) != M or len(acts) != K:
            raise DimensionMismatch("label counts do not match pmf shape")
        object.__setattr__(self, "pmf", _readonly(pmf))
        object.__setattr__(self, "hypotheses", hyps)
        object.__setattr__(self, "actions", acts)
        object.__setattr__(self, "log_pmf", _readonly(np.log(pmf)))

    @property
    def num_hypotheses(self) -> int:
        return self.pmf.shape[0]

    @property
    def num_actions(self) -> int:
        return self.pmf.shape[1]

    @property
    def alphabet_size(self) -> int:
        return self.pmf.shape[2]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "hypotheses": list(self.hypotheses),
            "actions": list(self.actions),
            "alphabet_size": self.alphabet_size,
            "pmf": self.pmf.tolist(),
        }

    def __hash__(self) -> int:
        return hash((self.pmf.tobytes(), self.pmf.shape, self.hypotheses, self.actions))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.pmf.shape == other.pmf.shape
            and bool(np.array_equal(self.pmf, other.pmf))
            and self.hypotheses == other.hypotheses
            and self.actions == other.actions
        )


@dataclass(frozen=True, eq=False)
class Mixture:
    """A probability distribution over actions."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise DimensionMismatch("mixture weights must be a non-empty vector")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise NonStochastic(f"mixture weights must be >= 0, got {w.tolist()}")
        if abs(float(w.sum()) - 1.0) > SUM_TOL:
            raise NonStochastic(f"mixture weights sum to {float(w.sum())!r}")
        object.__setattr__(self, "weights", _readonly(w))

    @classmethod
    def uniform(cls, k: int) -> Mixture:
        return cls(np.full(k, 1.0 / k))

    @classmethod
    def point_mass(cls, k: int, a: int) -> Mixture:
        w = np.zeros(k)
        w[a] = 1.0
        return cls(w)

    def __len__(self) -> int:
        return self.weights.size

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Mixture) and np.array_equal(self.weights, other.weights)

    def __hash__(self) -> int:
        return hash(self.weights.tobytes())


def kl_divergence(p: Sequence[float] | np.ndarray, q: Sequence[float] | np.ndarray) -> float:
    """Relative entropy D(p || q) in nats."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise DimensionMismatch(f"shapes {p.shape} and {q.shape} differ")
    _check_pmf(p, "p")
    _check_pmf(q, "q")
    d = float(np.sum(p * (np.log(p) - np.log(q))))
    return max(d, 0.0)


def kl_table(model: Model) -> np.ndarray:
    """``table[i, j, a] = D(q_i^a || q_j^a)``, clipped at zero against rounding."""
    P = model.pmf
    L = model.log_pmf
    table = np.einsum("iax,iax->ia", P, L)[:, None, :] - np.einsum("iax,jax->ija", P, L)
    return np.maximum(table, 0.0)


def discrimination_mask(model: Model) -> np.ndarray:
    """Boolean ``mask[i, j, a]``: action ``a`` separates H_i from H_j.

    Tested on the larger of the two directed divergences so the relation is
    symmetric by construction.
    """
    kl = kl_table(model)
    return np.maximum(kl, kl.transpose(1, 0, 2)) > KL_POSITIVE_TOL


def _check_hyp(model: Model, *idx: int) -> None:
    for i in idx:
        if not 0 <= int(i) < model.num_hypotheses:
            raise IndexOutOfRange(f"hypothesis index {i} outside [0, {model.num_hypotheses})")


def _check_action(model: Model, a: int) -> None:
    if not 0 <= int(a) < model.num_actions:
        raise IndexOutOfRange(f"action index {a} outside [0, {model.num_actions})")


def llr_increment(model: Model, i: int, j: int, a: int, x: int) -> float:
    """Per-sample log-likelihood ratio ln q_i^a(x) - ln q_j^a(x)."""
    _check_hyp(model, i, j)
    _check_action(model, a)
    if not 0 <= int(x) < model.alphabet_size:
        raise IndexOutOfRange(f"symbol {x} outside [0, {model.alphabet_size})")
    return float(model.log_pmf[i, a, x] - model.log_pmf[j, a, x])


def chernoff_coefficient(model: Model, i: int, j: int, a: int, s: float) -> float:
    """sum_x q_j^a(x)^s q_i^a(x)^(1-s), evaluated in the log domain."""
    if not 0.0 < s < 1.0:
        raise SOutOfRange(f"s must lie in (0, 1), got {s}")
    _check_hyp(model, i, j)
    _check_action(model, a)
    L = model.log_pmf
    return float(np.exp(s * L[j, a] + (1.0 - s) * L[i, a]).sum())


def discriminating_actions(model: Model, i: int, j: int) -> frozenset[int]:
    """Actions whose observation laws differ between H_i and H_j."""
    _check_hyp(model, i, j)
    if i == j:
        raise SameHypothesis(f"discriminating set needs two distinct hypotheses, got {i} twice")
    mask = discrimination_mask(model)
    return frozenset(int(a) for a in np.flatnonzero(mask[i, j]))


def validate_model(raw: Model | dict[str, Any] | Sequence[Any] | np.ndarray) -> Model:
    """Build a :class:`Model` and require every hypothesis pair to be separable.

    Accepts an existing model, the JSON dictionary layout, or a bare 3-D
    ``pmf`` array.
    """
    if isinstance(raw, Model):
        model = raw
    elif isinstance(raw, dict):
        pmf = np.asarray(raw["pmf"], dtype=np.float64)
        if "alphabet_size" in raw and pmf.ndim == 3 and int(raw["alphabet_size"]) != pmf.shape[2]:
            raise DimensionMismatch(
                f"alphabet_size {raw['alphabet_size']} disagrees with pmf last axis {pmf.shape[2]}"
            )
        model = Model(pmf, tuple(raw.get("hypotheses", ())), tuple(raw.get("actions", ())))
    else:
        model = Model(np.asarray(raw, dtype=np.float64))
    mask = discrimination_mask(model)
    M = model.num_hypotheses
    for i in range(M):
        for j in range(i + 1, M):
            if not mask[i, j].any():
                raise IndistinguishablePair(i, j)
    return model


def load_model(path: str | Path, *, validate: bool = True) -> Model:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if validate:
        return validate_model(raw)
    return Model(np.asarray(raw["pmf"], dtype=np.float64), tuple(raw.get("hypotheses", ())), tuple(raw.get("actions", ())))
