"""Exception hierarchy.

Errors are grouped by how the command line reports them: :class:`DataError`
subclasses exit with status 2, :class:`NumericFailure` with status 3 and
:class:`ConfigError` with status 1 (usage).
"""

from __future__ import annotations


class PolyPretrainError(Exception):
    """Base class for all package errors."""


class ConfigError(PolyPretrainError, ValueError):
    pass


class DataError(PolyPretrainError, ValueError):
    pass


class NumericFailure(PolyPretrainError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ZeroVector(NumericFailure):
    pass


class ShapeMismatch(PolyPretrainError, ValueError):
    pass


class OddDimension(PolyPretrainError, ValueError):
    pass


# -- P-SMILES -------------------------------------------------------------

class SmilesError(DataError):
    pass


class EmptyInput(SmilesError):
    pass


class EmptyBody(SmilesError):
    pass


class InvalidCharacter(SmilesError):
    pass


class UnterminatedBracketAtom(SmilesError):
    pass


class UnbalancedParentheses(SmilesError):
    pass


class DanglingRingBond(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


class StarDegreeError(SmilesError):
    pass


class StarCountError(SmilesError):
    pass


class AdjacentStarsError(SmilesError):
    pass


class DisconnectedError(SmilesError):
    pass


class SmilesSyntaxError(SmilesError):
    pass


# -- data files and models ---------------------------------------------

class MalformedRecord(DataError):
    pass


class InvariantViolation(DataError):
    pass


class UnknownAtomType(DataError):
    pass


class LengthExceeded(DataError):
    pass


class UnknownId(DataError):
    pass


class DataMisaligned(DataError):
    pass


class MissingConformer(DataError):
    pass


class TooFewRecords(DataError):
    pass


class ConstantTargets(DataError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptPayload(DataError):
    pass
