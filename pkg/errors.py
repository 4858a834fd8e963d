"""Error types raised across the LAWM modules.

Library code raises these; only the command line entry point turns them into
log lines and exit codes.
"""
from typing import Optional


class LawmError(Exception):
    """Base class for every error the library raises on purpose."""


class ContractViolation(LawmError, ValueError):
    """A caller broke an operation's pre-condition (wrong mode, shape, flag)."""


class NumericError(LawmError, ArithmeticError):
    """Non-finite values or a point outside a distribution's support."""


class ConfigError(LawmError, ValueError):
    """Unknown config key, bad override or out-of-range value."""


class DataError(LawmError, ValueError):
    """Missing or empty data (no rewards, empty corpus, unwritable output)."""


class DataFormatError(DataError):
    """A `.lawm` file that cannot be decoded."""

    def __init__(self, message: str, offset: int, section: str, path: Optional[str] = None):
        self.offset = offset
        self.section = section
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (section '{section}', byte offset {offset})")


class TrainingAborted(LawmError, RuntimeError):
    """Training stopped on a non-finite loss."""

    def __init__(self, message: str, last_checkpoint: Optional[str] = None):
        self.last_checkpoint = last_checkpoint
        suffix = f"; last good checkpoint: {last_checkpoint}" if last_checkpoint else "; no checkpoint written yet"
        super().__init__(message + suffix)
