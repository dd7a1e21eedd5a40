"""Exception hierarchy shared by every kidney module.

All errors derive from ValueError so callers can keep catching the broad
case, while the CLI maps each ``category`` to its own exit code.
"""


class KidneyError(ValueError):
    """Base class for domain errors."""
    category = "internal"


class ShapeError(KidneyError):
    category = "shape"


class NonFiniteError(KidneyError):
    category = "numerical"


class TapeError(KidneyError):
    category = "tape"


class GeometryError(KidneyError):
    category = "geometry"


class EmptyGroupError(KidneyError):
    category = "data"


class ConfigError(KidneyError):
    category = "usage"


class FormatError(KidneyError):
    category = "format"


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


class CheckpointError(FormatError):
    pass


class NameCollisionError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    category = "incompatible_checkpoint"


class IncompatibleCheckpointError(CheckpointError):
    category = "incompatible_checkpoint"
