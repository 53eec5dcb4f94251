"""Exception hierarchy. InputError maps to CLI exit code 1, NumericalError to 2."""


class HestonBoundsError(Exception):
    pass


class InputError(HestonBoundsError):
    """Bad user input: malformed files, invalid parameters, grid mismatches."""


class NumericalError(HestonBoundsError):
    """A numerical routine failed to converge or lost accuracy."""


class QuadratureError(NumericalError):
    def __init__(self, message, estimate=None, error=None):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


class OptimizerError(NumericalError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class OutOfBandError(InputError):
    """Option price violates a no-arbitrage bound; .side is 'lower' or 'upper'."""

    def __init__(self, message, side):
        super().__init__(message)
        self.side = side


class SingularMapError(InputError):
    pass


class GridMismatchError(InputError):
    pass
