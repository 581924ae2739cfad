#!/usr/bin/env python3
"""
Exception hierarchy for the ExPT toolkit

Every error raised on purpose by the package derives from ExptError and
carries the CLI exit code it maps to.
"""


class ExptError(Exception):
    """Base class for all package errors"""
    exit_code = 1


class ConfigError(ExptError):
    """Invalid configuration: unknown key, type mismatch, invariant violation"""
    exit_code = 2

    def __init__(self, message: str, key: str = None):
        self.key = key
        if key and key not in message:
            message = f"{key}: {message}"
        super().__init__(message)


class InputValidationError(ConfigError):
    """Inputs that violate an operation's preconditions"""


class ShapeError(InputValidationError):
    """Array or tensor shapes do not line up"""


class MaskError(InputValidationError):
    """Attention mask violates the AttentionMask invariants"""


class CandidateOutOfBoxError(InputValidationError):
    """A candidate design lies outside the oracle's domain box"""

    def __init__(self, row: int, coordinate: int, value: float, lo: float, hi: float):
        self.row = row
        self.coordinate = coordinate
        super().__init__(
            f"candidate {row} coordinate x_{coordinate} = {value!r} outside box [{lo}, {hi}]"
        )


class NumericError(ExptError):
    """Non-finite values in a computation"""
    exit_code = 3


class DegenerateKernelError(NumericError):
    """Cholesky factorization failed even at the largest jitter"""

    def __init__(self, message: str, jitter: float):
        self.jitter = jitter
        super().__init__(f"{message} (final jitter tried: {jitter:.3e})")


class PersistenceError(ExptError):
    """I/O failures reading or writing artifacts"""
    exit_code = 4


class BadMagicError(PersistenceError):
    """File does not start with the checkpoint magic bytes"""


class VersionMismatchError(PersistenceError):
    """Checkpoint format version differs from the reader's"""


class CrcMismatchError(PersistenceError):
    """Checkpoint payload does not match its CRC-64 trailer"""


class SweepConflictError(PersistenceError):
    """Sweep ledger belongs to a different sweep configuration"""


class DatasetFetchError(PersistenceError):
    """Remote dataset could not be downloaded"""
