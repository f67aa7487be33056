"""
Exception types raised across the package.
"""


class InvalidArgumentError(ValueError):
    pass


class DegenerateElementError(ValueError):
    pass


class HierarchyMismatchError(ValueError):
    pass


class SingularSystemError(RuntimeError):
    pass


class NonConvergenceError(RuntimeError):
    """
    Raised when an iterative procedure fails to converge.

    :arg state: the last iterate (or partial record) reached before failure
    """

    def __init__(self, message, state=None, iterations=None):
        super().__init__(message)
        self.state = state
        self.iterations = iterations


class DegenerateIndicatorError(ValueError):
    pass


class InvalidMetricError(ValueError):
    pass


class RemeshFailureError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DimensionMismatchError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class IllConditionedEffectivityError(ArithmeticError):
    pass
