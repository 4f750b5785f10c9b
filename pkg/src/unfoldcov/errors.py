"""Exception hierarchy shared by the library and the command line."""


class UnfoldError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ConfigError(UnfoldError, ValueError):
    """Invalid or incomplete configuration."""

    exit_code = 1


class NumericalError(UnfoldError, ArithmeticError):
    """A numerical procedure could not produce a valid result."""

    exit_code = 2


class ToyLossError(NumericalError):
    """Too many pseudo-experiments failed to converge."""

    exit_code = 3
