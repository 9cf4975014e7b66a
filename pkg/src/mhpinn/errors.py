"""Exception hierarchy."""


class MHPINNError(Exception):
    """Base class for library errors."""


class NumericalError(MHPINNError):
    """A computation produced an unusable numerical result."""


class NonFiniteError(NumericalError, ArithmeticError):
    """NaN or Inf produced by a primitive or a loss."""


class ConvergenceError(NumericalError):
    """An iterative solver failed to converge."""


class SamplingError(NumericalError):
    """A Markov chain made no progress."""
