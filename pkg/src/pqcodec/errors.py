"""Exception hierarchy shared across the codec."""


class PQCodecError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(PQCodecError):
    """Caller-supplied data violates an operation's preconditions."""


class InvalidConfigError(PQCodecError):
    """Inconsistent or unsupported configuration / artifact combination."""


class CorruptDataError(PQCodecError):
    """Serialized data failed validation (bad magic, CRC, truncation, range)."""


class UnsupportedVersionError(CorruptDataError):
    """Serialized data carries a format version this build cannot read."""


class ModelMismatchError(PQCodecError):
    """A bitstream references model identities other than the loaded ones."""
