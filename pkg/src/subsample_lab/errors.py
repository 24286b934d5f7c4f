"""Exception hierarchy; CLI exit codes key off these classes."""


class SubsampleLabError(Exception):
    """Base class for package errors."""


class ConfigError(SubsampleLabError, ValueError):
    """Invalid user input (config file, CLI arguments, dataset)."""


class NumericalError(SubsampleLabError, ArithmeticError):
    """A solver failed to converge or hit an ill-conditioned system."""
