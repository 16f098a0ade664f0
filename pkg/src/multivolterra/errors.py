"""Exception hierarchy shared by all solver modules."""

from __future__ import annotations


class VolterraError(Exception):
    """Base class for all package-specific errors."""


class DomainError(VolterraError):
    """An evaluation was requested outside the admissible domain.

    Raised for kernel arguments outside the simplex 0 <= s_i <= t and for
    math faults inside expression evaluation (division by zero, log of a
    nonpositive number, and similar), which are reported instead of letting
    non-finite values propagate silently.
    """


class CapacityError(VolterraError):
    """An enumeration would exceed a configured size cap."""


class MissingMetadataError(VolterraError):
    """An operation needs bound metadata that the problem does not carry."""


class NumericBlowupError(VolterraError):
    """The marching scheme produced a non-finite value."""

    def __init__(self, node_index: int, message: str | None = None):
        self.node_index = node_index
        super().__init__(message or f"non-finite value produced at node index {node_index}")


class TailDivergenceError(VolterraError):
    """The kernel-bound series shows no sign of convergence."""


class PivotVanishesError(VolterraError):
    """The first-order kernel vanishes on the diagonal, blocking reduction."""

    def __init__(self, t: float, message: str | None = None):
        self.t = t
        super().__init__(message or f"first-order kernel vanishes on the diagonal at t = {t!r}")


class ParseError(VolterraError):
    """A kernel expression failed to parse."""

    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"{message} (line {line}, column {column})")
