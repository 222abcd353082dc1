"""Exception hierarchy shared across the library and the CLI exit-code map."""


class SSCKitError(Exception):
    """Base class for all library errors."""


class FormatError(SSCKitError):
    """Malformed or truncated binary/JSON file."""


class ShapeError(SSCKitError):
    """Inconsistent array shapes or non-dividing supervoxel size."""


class DegenerateInput(SSCKitError):
    """Input with no defined content (e.g. all voxels UNKNOWN)."""


class SpecError(SSCKitError):
    """Invalid scene or configuration specification."""


class NumericalError(SSCKitError):
    """Non-finite value encountered during optimization."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
