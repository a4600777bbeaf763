"""Exception types shared across the package."""


class CogroundError(Exception):
    """Base class for all package errors."""


class ContractError(CogroundError, ValueError):
    """A documented precondition or invariant was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible; the message names both shapes."""


class CapacityError(ContractError):
    """Input exceeds a configured capacity (region or token budget)."""


class VocabularyError(ContractError):
    """A token id falls outside the configured vocabulary."""


class DataError(CogroundError, ValueError):
    """Input data is structurally invalid (e.g. a degenerate box)."""


class SchemaError(DataError):
    """A dataset record violates the JSONL schema; the message names the field."""


class ParseError(DataError):
    """A dataset file could not be parsed; the message carries the line number."""


class TrainingError(CogroundError, RuntimeError):
    """Optimization failed numerically (e.g. NaN gradients)."""


class EvalError(CogroundError, ValueError):
    """Evaluation was requested on data that cannot support it."""
