"""
Error types and exit-code decoding for MIFCN.

Every failure the package raises derives from :class:`MifcnError`, which
carries the process exit code the command-line driver reports for it:

    0  success
    1  usage error (bad flags, malformed config, violated preconditions)
    2  data error (missing or invalid files, corrupt checkpoints)
    3  numeric failure (NaN loss, failed gradient check)

Example Usage:
    ```python
    from mifcn.errors import DataError, describe_exit_code

    try:
        load_test_case(path, T=5)
    except DataError as e:
        print(describe_exit_code(e.exit_code), e)
    ```

Copyright 2025 The MIFCN Authors
Licensed under the Apache License, Version 2.0
"""

from typing import Dict, Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

EXIT_CODE_NAMES: Dict[int, str] = {
    EXIT_OK: "OK",
    EXIT_USAGE: "usage error",
    EXIT_DATA: "data error",
    EXIT_NUMERIC: "numeric failure",
}


class MifcnError(Exception):
    """Base class for all errors raised by the package."""

    exit_code: int = EXIT_USAGE


class PreconditionError(MifcnError, ValueError):
    """An operation was called with arguments outside its contract."""

    exit_code = EXIT_USAGE


class UsageError(MifcnError):
    """The command line or the run configuration is malformed."""

    exit_code = EXIT_USAGE


class DataError(MifcnError):
    """Input files are missing, unreadable, or in an unsupported format."""

    exit_code = EXIT_DATA


class CheckpointError(DataError):
    """A checkpoint is corrupt, truncated, or does not match the configuration."""


class NumericError(MifcnError):
    """A numeric computation produced an invalid result."""

    exit_code = EXIT_NUMERIC


class TrainingDiverged(NumericError):
    """The training loss became non-finite.

    Attributes:
        record: The partial TrainRecord holding every completed finite epoch
    """

    def __init__(self, message: str, record: Optional[object] = None):
        super().__init__(message)
        self.record = record


def describe_exit_code(code: int) -> str:
    """Decode an exit code into a human-readable string."""
    return EXIT_CODE_NAMES.get(code, f"exit code {code}")
