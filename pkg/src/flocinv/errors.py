"""Exception types raised by flocinv."""
from __future__ import annotations


class FlocInvError(Exception):
    """Base class for all package errors."""


class InvalidInputError(FlocInvError, ValueError):
    """An argument or file violates a documented precondition or invariant."""


class NumericalFailure(FlocInvError, RuntimeError):
    """A computation produced non-finite values or could not proceed."""


class IntegrationError(NumericalFailure):
    """The forward integrator hit a non-finite state.

    Attributes
    ----------
    step:
        Index of the time step (1-based) at which the failure was detected.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
