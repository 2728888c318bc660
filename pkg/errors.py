"""
PixelVeil — Error Types
One tree for everything the library raises. Access denial is not here:
keycore.DENIED is an ordinary return value.
"""


class PixelVeilError(Exception):
    """Root of every PixelVeil exception."""


class ValidationError(PixelVeilError, ValueError):
    """Bad input: out-of-range value, schema violation, broken invariant."""


class ConfigError(ValidationError):
    """The system configuration cannot produce a working setup."""


class IntegrityError(PixelVeilError):
    """Authentication failed or required key material is missing."""

    def __init__(self, message, pso_id=None):
        super().__init__(message)
        self.pso_id = pso_id


class CorruptionError(IntegrityError):
    """A stored file is damaged: short read, bad magic, digest mismatch."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = str(path) if path is not None else None
