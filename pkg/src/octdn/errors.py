"""Error hierarchy shared across the toolkit.

The command-line front end maps these onto exit codes: usage problems exit 1,
`DataFormatError` subclasses exit 2, everything else exits 3.
"""


class OctdnError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(OctdnError, ValueError):
    """Operand dimensions are incompatible; message names both dim tuples."""


class DataFormatError(OctdnError, ValueError):
    """A file on disk does not conform to its format contract."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedFormatError(DataFormatError):
    """Recognized family but unsupported variant (e.g. ASCII PGM)."""


class VersionMismatchError(DataFormatError):
    """Checkpoint format version is not one this build can read."""


class TruncatedFileError(DataFormatError):
    """File ends before the declared payload does."""


class ChecksumMismatchError(DataFormatError):
    """Stored CRC does not match the file contents."""


class DegenerateInputError(OctdnError, ValueError):
    """Input carries no usable signal (e.g. registering a constant image)."""


class DegenerateStatisticsError(OctdnError, ValueError):
    """Batch normalization asked to normalize over fewer than 2 samples."""


class TrainingDivergedError(OctdnError, RuntimeError):
    """Loss became non-finite; message records epoch and batch index."""
