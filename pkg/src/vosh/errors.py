"""Exception types shared across the package."""


class VoshError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(VoshError, ValueError):
    """An argument violates a documented precondition."""


class ContractViolationError(VoshError, RuntimeError):
    """Internal state does not satisfy a documented contract."""


class DescriptorError(VoshError, ValueError):
    """A scene or config descriptor failed validation."""


class AssetParseError(VoshError, ValueError):
    """Base class for asset container parse failures."""


class BadMagicError(AssetParseError):
    """Container does not start with the expected magic bytes."""


class VersionMismatchError(AssetParseError):
    """Container version is not supported."""


class TruncatedAssetError(AssetParseError):
    """Container ends before a section or header is complete."""


class ChecksumError(AssetParseError):
    """A section payload does not match its CRC."""
