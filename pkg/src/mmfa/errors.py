"""Exception taxonomy. CLI maps MMFAError subclasses to exit code 1."""


class MMFAError(Exception):
    """Base for all domain errors raised by this package."""


class DimensionError(MMFAError, ValueError):
    """Tensor shapes disagree with an operation's contract."""


class BatchSizeError(MMFAError, ValueError):
    """Batch too small (or empty) for the requested operation."""


class ParameterError(MMFAError, ValueError):
    """Scalar argument outside its legal range (dropout rate, slope, top-k...)."""


class ContractError(MMFAError, ValueError):
    """An internal invariant was violated (non-scalar loss, bad decay set...)."""


class LabelError(MMFAError, ValueError):
    """Class index out of range or non-binary attribute value."""


class SchemaError(MMFAError, ValueError):
    """Mismatched attribute counts or feature schemas between inputs."""


class ManifestError(MMFAError, ValueError):
    """Malformed manifest; carries file and line context when available."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:" if line is None else f"{path}:{line}:"
        super().__init__(f"{loc} {message}" if loc else message)
        self.path = path
        self.line = line


class ConfigError(MMFAError, ValueError):
    """Invalid or inconsistent configuration."""


class ProtocolError(MMFAError, ValueError):
    """Evaluation protocol cannot be satisfied by the given data."""


class NumericError(MMFAError, ArithmeticError):
    """Non-finite value where a finite one is required (NaN loss abort)."""
