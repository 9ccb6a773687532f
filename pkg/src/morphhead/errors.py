"""Exception types shared across the package."""


class MorphheadError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MorphheadError, ValueError):
    """An argument violates an operation's preconditions."""


class InvalidStateError(MorphheadError, RuntimeError):
    """An object is used before it is ready (e.g. backward without forward)."""


class TrainingDivergedError(MorphheadError, RuntimeError):
    """Parameters or losses became non-finite."""
