"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: usage errors exit 1, data errors exit 2,
numeric failures exit 3.
"""


class MosadvError(Exception):
    """Base class for all package errors."""


class UsageError(MosadvError):
    """Bad invocation: unknown config keys, missing inputs, bad flag values."""


class DataError(MosadvError):
    """Malformed or inconsistent input data."""


class NumericError(MosadvError):
    """A numeric computation failed (divergence, non-finite values)."""


class FormatError(DataError):
    """File content does not match the expected on-disk format."""


class ChannelCountError(FormatError):
    """Audio file is not mono."""


class EmptySignalError(DataError):
    """Signal has no samples or is identically zero where that is not allowed."""


class DimensionError(DataError):
    """Operands have incompatible lengths or shapes."""


class DomainError(NumericError):
    """Input outside the mathematical domain of an operation."""


class ContractError(MosadvError):
    """An internal API contract was violated (programming error)."""


class ShortSignalError(DataError):
    """Signal too short for the requested analysis window."""


class BundleError(DataError):
    """Weight bundle cannot be parsed."""


class FingerprintError(BundleError):
    """Weight bundle was produced by an incompatible architecture."""


class VersionError(BundleError):
    """Weight bundle format version is not supported."""


class TrainingError(NumericError):
    """Training diverged or could not run."""


class AttackError(NumericError):
    """Adversarial optimization aborted."""
