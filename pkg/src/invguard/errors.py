"""Exception hierarchy shared by the parsers, checker, binder and instrumenter."""

from __future__ import annotations


class InvGuardError(Exception):
    """Base class. Carries an optional source position."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.message = message
        self.line = line
        self.col = col
        if line is not None:
            message = f"{line}:{col}: {message}"
        super().__init__(message)


class ParseError(InvGuardError):
    """Malformed input text."""


class UnknownOperator(ParseError):
    pass


class DuplicateIntermediate(InvGuardError):
    pass


class UnknownVariable(InvGuardError):
    pass


class ArityMismatch(InvGuardError):
    pass


class FreeVarScopeError(InvGuardError):
    pass


class DuplicateState(InvGuardError):
    pass


class DuplicateFunction(InvGuardError):
    pass


class UndeclaredTemp(InvGuardError):
    pass


class ForInUnusedIterator(InvGuardError):
    pass


class UnknownCallee(InvGuardError):
    pass


class ReservedName(InvGuardError):
    pass


class UnboundFreeVarNoMap(InvGuardError):
    pass


class InstrumentationCollision(InvGuardError):
    pass


class UnknownEntry(InvGuardError):
    pass


class InvalidParams(InvGuardError):
    pass
