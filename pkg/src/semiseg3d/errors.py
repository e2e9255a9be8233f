"""Exception types shared across the package."""


class SegError(Exception):
    """Base class for all package errors."""


class MalformedFile(SegError):
    pass


class UnsupportedFormat(SegError):
    pass


class InvalidWindow(SegError, ValueError):
    pass


class ShapeError(SegError, ValueError):
    pass


class DomainError(SegError, ValueError):
    pass


class NonFiniteLoss(SegError, FloatingPointError):
    pass


class ConfigMismatch(SegError):
    pass


class ConfigError(SegError, ValueError):
    pass


class MissingTile(SegError, KeyError):
    pass


class DegenerateCase(SegError):
    """Raised when a surface distance is undefined (one mask empty)."""


class EmptyInput(SegError, ValueError):
    pass


class MissingCase(SegError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("unmatched case ids: " + ", ".join(self.missing))
