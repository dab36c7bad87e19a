"""Exception hierarchy shared by every tagstrain module."""

from typing import Optional


class TagstrainError(RuntimeError):
    pass


class DomainError(TagstrainError):
    """A value outside the domain an operation is defined on."""


class DegenerateGeometryError(TagstrainError):
    """Zero-length reference segment; strain is undefined."""


class ShapeError(TagstrainError):
    pass


class FormatError(TagstrainError):
    pass


class ConfigError(TagstrainError):
    pass


class DataError(TagstrainError):
    pass


class NonFiniteError(TagstrainError):
    def __init__(self, message: str, epoch: Optional[int] = None, step: Optional[int] = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch}, step {step})"
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class StageError(TagstrainError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


class DegenerateBoxError(DomainError):
    """The localizer predicted a box with min >= max on some axis."""
