"""Exception hierarchy shared across the package."""


class VortexError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(VortexError, ValueError):
    """An argument violates an operation's precondition."""


class CorruptDatasetError(VortexError, RuntimeError):
    """A dataset file or manifest failed validation (bad magic, CRC, role, ...)."""


class NonFiniteGradientError(VortexError, ArithmeticError):
    """A gradient vector contained NaN/Inf; training must abort with diagnostics."""
