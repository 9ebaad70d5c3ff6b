"""Exception types raised across the package."""


class MileError(Exception):
    """Base class for all package errors."""


class ShapeError(MileError, ValueError):
    pass


class InvalidLabelError(MileError, ValueError):
    pass


class RankError(MileError, ValueError):
    pass


class FrozenParameterError(MileError):
    """A gradient or update was requested for a frozen value."""


class ImmutabilityError(MileError):
    """Attempt to train or modify a frozen expert."""


class SequencingError(MileError, ValueError):
    pass


class RegistrationError(MileError, ValueError):
    pass


class UnknownTaskError(MileError, LookupError):
    pass


class EmptyDatasetError(MileError, ValueError):
    pass


class RoutingError(MileError, ValueError):
    pass


class CoverageError(MileError, ValueError):
    pass


class UndefinedReferenceError(MileError, ValueError):
    pass


class FisherError(MileError, ValueError):
    pass


class ConfigError(MileError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DecodeError(MileError, ValueError):
    """Base class for binary format decoding failures."""


class CorruptHeaderError(DecodeError):
    pass


class VersionMismatchError(DecodeError):
    pass


class TruncatedPayloadError(DecodeError):
    pass
