from typing import Optional

import numpy as np


class SetKKLError(Exception):
    """Base exception for setkkl"""
    pass


class NonFiniteState(SetKKLError):
    """Raised when an integrated state becomes NaN or infinite."""
    def __init__(self, message: str, time: Optional[float] = None, state: Optional[np.ndarray] = None):
        super().__init__(message)
        self.time = time
        self.state = state


class BadRadii(SetKKLError):
    """Raised when cutoff radii are inconsistent"""
    pass


class UnknownExample(SetKKLError):
    """Raised when an example name is not in the registry"""
    pass


class NotHurwitz(SetKKLError):
    """Raised when a filter eigenvalue has a nonnegative real part"""
    pass


class NotControllable(SetKKLError):
    """Raised when the filter pair (A_o, B_o) is not controllable."""
    def __init__(self, message: str, rank: int, condition: float):
        super().__init__(message)
        self.rank = rank
        self.condition = condition


class EmptySet(SetKKLError):
    """Raised when a set metric receives an empty set"""
    pass


class LengthMismatch(SetKKLError):
    """Raised when two tuples of different lengths are compared"""
    pass


class TooLarge(SetKKLError):
    """Raised when a tuple is too long for permutation enumeration"""
    pass


class SignalGap(SetKKLError):
    """Raised when an output signal does not cover the requested span."""
    def __init__(self, message: str, covered: tuple[float, float], requested: tuple[float, float]):
        super().__init__(message)
        self.covered = covered
        self.requested = requested


class OrderTooHigh(SetKKLError):
    """Raised when finite differences would be nested too deeply"""
    pass


class ConfigError(SetKKLError):
    """Raised when an experiment configuration is invalid."""
    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.field = field
        self.line = line


class EmptyGrid(SetKKLError):
    """Raised when no tabulation grid point lies inside the domain"""
    pass
