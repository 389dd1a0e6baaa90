"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so new error types should
subclass one of the three roots below rather than raising bare ValueError.
"""


class ProtobankError(Exception):
    """Base class for all package errors."""


class DataError(ProtobankError):
    """Invalid, inconsistent, or malformed input data."""


class SchemaError(DataError):
    """A record or file violates the declared schema."""


class FormatError(DataError):
    """A binary container or protocol message cannot be decoded."""


class MetricError(DataError):
    """A requested metric is undefined for the given inputs."""


class NumericError(ProtobankError):
    """Numeric health violation: NaN/Inf or an invalid numeric operation."""


class ShapeError(NumericError):
    """Tensor operands have incompatible shapes."""
