"""Exception types raised by astermix."""

from __future__ import annotations


class AstermixError(Exception):
    """Base class for all package errors."""


class DomainError(AstermixError, ValueError):
    """An argument lies outside the domain of the operation."""


class ResponseError(AstermixError, ValueError):
    """A response vector violates the graph's structural constraints."""

    def __init__(self, message, node=None, row=None):
        super().__init__(message)
        self.node = node
        self.row = row


class GraphSpecError(AstermixError, ValueError):
    """A graph specification is malformed."""

    def __init__(self, message, line=None, field=None):
        if line is not None:
            message = f"line {line}" + (f", field '{field}'" if field else "") + f": {message}"
        super().__init__(message)
        self.line = line
        self.field = field


class FormulaError(AstermixError, ValueError):
    """A model formula could not be parsed."""

    def __init__(self, message, text="", pos=None):
        if pos is not None:
            message = f"{message} at position {pos}: {text!r}"
        super().__init__(message)
        self.text = text
        self.pos = pos


class DesignError(AstermixError, ValueError):
    """The model design (data, formula, matrices) is unusable."""


class ConvergenceError(AstermixError, RuntimeError):
    """An iterative solver failed to converge.

    Carries whatever diagnostics the solver had when it gave up: the last
    iterate, the final gradient norm and, for the outer fitting loop, the
    trace of objective values and a partial result.
    """

    def __init__(self, message, iterate=None, grad_norm=None, trace=None, result=None):
        super().__init__(message)
        self.iterate = iterate
        self.grad_norm = grad_norm
        self.trace = trace
        self.result = result


class PreconditionError(AstermixError, ValueError):
    """The point supplied does not satisfy the operation's preconditions."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class SingularityError(AstermixError, ArithmeticError):
    """A matrix that must be positive definite failed to factorize."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition
