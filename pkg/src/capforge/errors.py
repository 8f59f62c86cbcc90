"""Exception taxonomy.

Validation errors cover bad inputs and violated preconditions (CLI exit
code 1); everything else raised from pipeline internals is a runtime
failure (exit code 2).
"""


class CapError(Exception):
    """Base class for all capforge errors."""


class ValidationError(CapError):
    """Bad input, malformed artifact, or violated precondition."""


class DatasetFormatError(ValidationError):
    """On-disk dataset rejected by the loader.

    ``reason`` is one of the fixed codes so callers can test which rule
    fired: ``bad-manifest``, ``missing-file``, ``byte-length-mismatch``,
    ``zero-norm-row``, ``label-out-of-range``, ``malformed-split``.
    """

    def __init__(self, reason: str, message: str):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


class ProviderError(CapError):
    """Description provider failed."""


class InsufficientCandidatesError(ProviderError, ValidationError):
    """Provider holds fewer candidates than requested."""


class ProviderUnavailableError(ProviderError):
    """Provider backend cannot be reached."""


class ClusteringError(CapError):
    """k-means could not run on the given input."""


class DivergenceError(CapError):
    """Training loss became non-finite."""
