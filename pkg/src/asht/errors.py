"""Exception hierarchy.

Every error carries a stable class name; the CLI prints that name on exit
code 2 so scripts can match on it.
"""

from __future__ import annotations


class ASHTError(Exception):
    """Base class for all package errors."""


class ModelError(ASHTError, ValueError):
    pass


class NonStochastic(ModelError):
    pass


class ZeroMass(ModelError):
    pass


class DimensionMismatch(ModelError):
    pass


class IndistinguishablePair(ModelError):
    def __init__(self, i: int, j: int) -> None:
        super().__init__(f"hypotheses {i} and {j} share every action's pmf; no action discriminates them")
        self.i = i
        self.j = j


class IndexOutOfRange(ASHTError, IndexError):
    pass


class SameHypothesis(ASHTError, ValueError):
    pass


class ParameterOutOfRange(ASHTError, ValueError):
    pass


class SOutOfRange(ParameterOutOfRange):
    pass


class InfeasibleDesign(ASHTError, ValueError):
    pass


class TooManyActions(ASHTError, ValueError):
    pass


class MissingPrevAction(ASHTError, ValueError):
    pass


class DesignMissing(ASHTError, ValueError):
    pass


class InsufficientPoints(ASHTError, ValueError):
    pass


class TooFewSamples(ASHTError, ValueError):
    pass


class ToleranceOutOfRange(ASHTError, ValueError):
    pass


class InvariantViolation(ASHTError, RuntimeError):
    """An internal consistency check failed (CLI exit code 3)."""
