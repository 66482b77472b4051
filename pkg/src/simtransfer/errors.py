"""Exception types shared across the package."""


class TransferError(Exception):
    """Base class for all errors raised by simtransfer."""


class ParseError(TransferError):
    pass


class InvariantError(TransferError):
    pass


class DimensionError(TransferError, ValueError):
    pass


class MissingCategoryError(TransferError):
    pass


class UnresolvableError(TransferError):
    pass


class IndexMismatchError(TransferError):
    pass


class CoverageError(TransferError):
    pass


class DomainError(TransferError, ValueError):
    pass


class SingularSystemError(TransferError):
    pass


class MissingRegressorError(TransferError):
    pass


class EmptySubsetError(TransferError):
    pass


class ConfigError(TransferError, ValueError):
    pass


class ConvergenceWarning(UserWarning):
    """The non-negative refit stopped at its iteration cap."""
