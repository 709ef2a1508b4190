"""Exception hierarchy shared by every module."""


class NpmixError(Exception):
    """Base class for package errors."""


class InvalidArgumentError(NpmixError, ValueError):
    pass


class NumericalMassError(NpmixError, ArithmeticError):
    """A truncation set carries too little probability mass to sample from."""


class ConditioningError(NpmixError, ArithmeticError):
    """A linear system is numerically singular."""


class DegenerateEstimateError(NpmixError, ArithmeticError):
    """A positive-part density estimate has vanishing mass."""


class SliceDegenerateError(NpmixError, RuntimeError):
    """The slice threshold forced an unbounded number of atoms."""


class NumericalFailure(NpmixError, FloatingPointError):
    """A NaN appeared inside the chain."""
