"""Format version parsing and compatibility checks."""

from packaging.version import InvalidVersion, Version

from core.error_handler import FormatError


def normalize_version(version_str: str) -> str:
    """
    Normalize version string by removing 'v' prefix.

    Args:
        version_str: Version string (e.g., "v1.0" or "1.0")

    Returns:
        Normalized version string without 'v' prefix
    """
    return version_str.strip().lstrip("v")


def parse_version(version_str: str) -> Version:
    """
    Parse version string into Version object.

    Raises:
        InvalidVersion: If version string is invalid
    """
    return Version(normalize_version(version_str))


def is_compatible_format(found: str, supported: str) -> bool:
    """
    Check whether an artifact written as ``found`` can be read by a reader of ``supported``.

    Versions are compatible when they share the major number.
    """
    try:
        return parse_version(found).major == parse_version(supported).major
    except InvalidVersion:
        return False


def require_compatible_format(found: object, supported: str, what: str) -> None:
    """
    Raise FormatError unless ``found`` is a version string compatible with ``supported``.

    Args:
        found: Value read from the artifact
        supported: Version written by this code
        what: Artifact description used in the error message
    """
    if not isinstance(found, str) or not is_compatible_format(found, supported):
        raise FormatError(f"Unsupported {what} format version {found!r} (expected {supported})")
