"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where the operation is defined."""


class ConvergenceError(RuntimeError):
    """An iterative search failed to bracket or reach its target."""


class NoSolutionError(ValueError):
    """An inversion has no solution, e.g. an option price outside arbitrage bounds."""


class NumericalError(ArithmeticError):
    """A numerical routine produced a non-finite or otherwise unusable result."""


class GridError(ValueError):
    """Surface data does not sit on the expected strike/maturity grid."""
