"""Exception hierarchy shared across the engine.

The CLI maps InputError to exit code 2 and everything else to exit code 3.
"""


class RecistSegError(Exception):
    """Base class for all engine errors."""


class InputError(RecistSegError):
    """Bad user input: unreadable/malformed files, mismatched geometry, bad flags."""


class NiftiParseError(InputError):
    """Malformed NIfTI-1 header; the message names the offending field."""


class UnsupportedDtypeError(InputError):
    """On-disk scalar type outside the supported set."""


class DimensionalityError(InputError):
    """Volume is not 3D (or 4D with a singleton fourth dimension)."""


class ManifestError(InputError):
    """Weight file does not match the tensor manifest derived from the config."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("weight manifest mismatch:\n  " + "\n  ".join(self.violations))


class LensVersionError(InputError):
    """Weight file declares an unsupported format version."""


class ShapeError(RecistSegError):
    """Tensor shapes inconsistent with the operation's contract."""


class ConfigError(RecistSegError):
    """Model configuration violates an architectural constraint."""
