# SPDX-License-Identifier: GPL-3.0-only
"""Exception types raised across the re-ranking package.

Each type subclasses the builtin a caller would otherwise expect, so code that
catches ``ValueError`` or ``RuntimeError`` keeps working.
"""


class FeatureFormatError(ValueError):
    """A binary feature or weight file has a malformed header or body."""


class DataError(ValueError):
    """Input data is well-formed but its content is unusable."""


class ArgumentError(ValueError):
    """An operation was called with arguments outside its preconditions."""


class ConfigError(ValueError):
    """A run configuration failed validation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in a numeric intermediate."""


class TrainingError(RuntimeError):
    """Training could not start or had to abort."""


class GenerationError(RuntimeError):
    """The synthetic generator could not satisfy its margin assertions."""
