"""Shared exception types, mapped to CLI exit codes in cli.main."""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its contract."""


class ConfigError(ValueError):
    """Bad or unknown configuration (CLI exit code 1)."""


class DataError(ValueError):
    """Malformed or missing data files (CLI exit code 2)."""


class NumericError(FloatingPointError):
    """Non-finite values where finite ones are required (CLI exit code 3)."""


class TapeConsumed(RuntimeError):
    """A Tape's backward pass was requested twice."""
