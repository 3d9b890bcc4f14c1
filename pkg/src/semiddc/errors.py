"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems -> 2,
data/parsing problems -> 3, numerical failures -> 4.
"""


class ConfigError(ValueError):
    """A configuration value is outside its admissible range or unknown."""


class ParseError(ValueError):
    """An input file is malformed; the message names the offending line."""


class IntegrityError(ValueError):
    """Structurally valid input that violates a data invariant."""


class ValidationError(ValueError):
    """An input value violates a documented precondition."""


class ContractError(ValueError):
    """An operation was called outside its contract (caller bug)."""


class EstimationError(RuntimeError):
    """An estimation step cannot produce a finite answer on this sample."""


class NumericError(RuntimeError):
    """A numerical computation produced non-finite or singular results."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to reach its tolerance."""
