"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes (see ``da3.cli``).
"""

from __future__ import annotations


class DA3Error(Exception):
    """Base class for all package errors."""


class ConfigError(DA3Error, ValueError):
    """Invalid configuration: bad hyperparameters, odd extents, unknown strategy..."""


class DimensionError(ConfigError):
    """Tensor extents do not agree between operands."""


class InvariantViolation(DA3Error, AssertionError):
    """An internal consistency check failed (tape audit, frozen-parameter drift)."""


class NumericError(DA3Error, ArithmeticError):
    """Non-finite loss or a failed gradient check."""
