"""Exception types shared across the package."""


class D2TError(Exception):
    """Base class for all package errors."""


class MalformedMR(D2TError, ValueError):
    pass


class UnknownId(D2TError, KeyError):
    pass


class ShapeMismatch(D2TError, ValueError):
    pass


class NonFiniteValue(D2TError, FloatingPointError):
    pass


class EmptyBeam(D2TError, RuntimeError):
    """Every beam candidate was pruned; retry with blocking disabled."""


class EmptyCandidate(D2TError, ValueError):
    pass


class LengthMismatch(D2TError, ValueError):
    pass


class ConfigError(D2TError, ValueError):
    pass


class CheckpointMismatch(D2TError, ValueError):
    pass
