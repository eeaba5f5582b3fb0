"""Exception types shared across the package."""


class CafmmError(Exception):
    """Base class."""


class ConfigurationError(CafmmError, ValueError):
    pass


class DomainError(CafmmError, ValueError):
    pass


class ValidationError(CafmmError, ValueError):
    pass


class ShapeError(ValidationError):
    pass


class LinAlgFailure(CafmmError, ArithmeticError):
    pass


class IngestionError(CafmmError, ValueError):
    pass


class ArchiveFormatError(CafmmError, ValueError):
    pass
