"""Exception types shared across the package."""


class CirmapError(Exception):
    """Base class for all package errors."""


class ShapeError(CirmapError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(CirmapError, ValueError):
    """A hyperparameter is outside its valid range (e.g. temperature <= 0)."""


class DegenerateInputError(CirmapError, ValueError):
    """Input is numerically degenerate (e.g. a near-zero row fed to a normalizer)."""


class ContractError(CirmapError, ValueError):
    """An operation precondition was violated (e.g. backward on a non-scalar)."""


class TemplateError(CirmapError, ValueError):
    """Unknown prompt template or slot arity mismatch."""


class MissingIdError(CirmapError, KeyError):
    """Lookup of an id that is not present in an embedding table."""


class FormatError(CirmapError, ValueError):
    """A file on disk does not conform to the expected binary/JSON layout."""


class ConfigError(CirmapError, ValueError):
    """Configuration document is malformed or contains unknown keys."""


class InconsistentSpecError(CirmapError, ValueError):
    """A generator spec is internally inconsistent or unsatisfiable."""


class TrainingDivergedError(CirmapError, RuntimeError):
    """Training produced a non-finite loss and was aborted."""
