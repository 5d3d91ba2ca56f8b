"""Exception types shared across the package."""


class ConvsqlError(Exception):
    """Base class for all package errors."""


class ShapeError(ConvsqlError):
    pass


class ConfigError(ConvsqlError):
    pass


class DataError(ConvsqlError):
    """Bad input files: schemas, interactions, seeds."""


class SqlParseError(ConvsqlError):
    """SQL text outside the supported fragment or malformed."""


class GrammarError(ConvsqlError):
    """Illegal action sequences or AST states."""


class DecodeBudgetExceeded(ConvsqlError):
    pass


class CheckpointError(ConvsqlError):
    pass
