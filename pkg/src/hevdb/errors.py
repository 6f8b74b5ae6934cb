"""Exception hierarchy shared by every layer of the package."""


class HevdbError(Exception):
    """Base class for all package errors."""


class ParameterError(HevdbError, ValueError):
    """Mismatched ring degree/modulus or an out-of-range argument."""


class CapacityError(HevdbError, ValueError):
    """Input does not fit the configured slot count, block size or record slot."""


class ProtocolError(HevdbError):
    """Epoch mismatch, unexpected message tag, or a malformed request."""


class IntegrityError(HevdbError):
    """Authentication or checksum failure, or an undecodable PIR answer."""
