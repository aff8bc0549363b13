"""Exception types raised on purpose by this package."""


class ExportError(Exception):
    """Base class for export failures."""


class EncoderLoadError(ExportError):
    """Unknown encoder name, or the backing model cannot be loaded."""
