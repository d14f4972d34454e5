"""Shared exception types."""


class ApkProbeError(Exception):
    """Base class for all toolkit errors."""


class FormatError(ApkProbeError):
    """A binary container (ZIP, AXML, DEX) violates its file format.

    ``offset`` points at the byte where parsing gave up, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = "%s (at offset 0x%x)" % (message, offset)
        super().__init__(message)
        self.offset = offset


class ValidationError(ApkProbeError):
    """Input is well-formed but violates a documented precondition."""


class TransformError(ApkProbeError):
    """A transformation could not be applied to an app."""


class CapacityError(TransformError):
    """A structural limit (e.g. multidex slot count) was exceeded."""


class ConflictError(ApkProbeError):
    """An append-only store rejected a duplicate row."""
