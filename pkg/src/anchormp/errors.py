"""Exception types shared across the package.

Each maps to a distinct CLI exit code (see cli.EXIT_CODES).
"""


class AnchorMPError(Exception):
    """Base class for all package errors."""


class DimensionError(AnchorMPError):
    """Tensor shapes incompatible with the requested operation."""


class NonFiniteError(AnchorMPError):
    """An operation produced NaN or Inf; computation is aborted."""


class ContractError(AnchorMPError):
    """A documented precondition or internal contract was violated."""


class CapacityError(AnchorMPError):
    """An assembled sequence exceeds the decoder's position budget."""


class ParseError(AnchorMPError):
    """A graph or config file could not be parsed."""


class ValidationError(AnchorMPError):
    """Parsed data violates a structural invariant."""


class GenerationError(AnchorMPError):
    """A synthetic corpus spec is infeasible."""


class IntegrityError(AnchorMPError):
    """A checkpoint or container file is corrupt or version-mismatched."""


class ConfigError(AnchorMPError):
    """A run configuration is invalid (unknown key, bad value)."""


class AuditError(AnchorMPError):
    """A graph cannot be audited (e.g. unlabeled nodes)."""
