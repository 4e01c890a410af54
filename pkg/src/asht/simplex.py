"""Dense tableau simplex for small problems of the form

    maximize c @ x   subject to   A @ x <= b,  x >= 0,  b >= 0.

With ``b >= 0`` the slack basis is feasible at the origin, so a single phase
suffices.  Bland's rule is used for both the entering and leaving variable;
the max-min design LPs are highly degenerate (most right-hand sides are 0)
and Bland's rule rules out cycling there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ASHTError, ParameterOutOfRange

PIVOT_TOL = 1e-12


class Unbounded(ASHTError):
    pass


@dataclass(frozen=True)
class LPResult:
    x: np.ndarray
    objective: float
    iterations: int
    status: str


def maximize(c: np.ndarray, A: np.ndarray, b: np.ndarray, max_iter: int = 10_000) -> LPResult:
    c = np.asarray(c, dtype=np.float64)
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    m, n = A.shape
    if c.shape != (n,) or b.shape != (m,):
        raise ParameterOutOfRange(f"inconsistent LP shapes: c{c.shape}, A{A.shape}, b{b.shape}")
    if np.any(b < 0):
        raise ParameterOutOfRange("right-hand side must be non-negative for the slack start")

    # Rows 0..m-1 are constraints, last row is the reduced-cost row (-c).
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n : n + m] = np.eye(m)
    T[:m, -1] = b
    T[m, :n] = -c
    basis = list(range(n, n + m))

    for it in range(max_iter):
        entering = next((j for j in range(n + m) if T[m, j] < -PIVOT_TOL), None)
        if entering is None:
            x = np.zeros(n + m)
            for row, var in enumerate(basis):
                x[var] = T[row, -1]
            return LPResult(x[:n].copy(), float(T[m, -1]), it, "optimal")
        col = T[:m, entering]
        ratios = [(T[r, -1] / col[r], r) for r in range(m) if col[r] > PIVOT_TOL]
        if not ratios:
            raise Unbounded("objective is unbounded above")
        best = min(q for q, _ in ratios)
        # Bland: among tied minimum ratios, the lowest-indexed basic variable leaves.
        _, pr = min((basis[r], r) for q, r in ratios if q <= best + PIVOT_TOL)
        T[pr] /= T[pr, entering]
        for r in range(m + 1):
            if r != pr and T[r, entering] != 0.0:
                T[r] -= T[r, entering] * T[pr]
        basis[pr] = entering
    raise ASHTError(f"simplex did not converge in {max_iter} iterations")
