"""Exception hierarchy shared across the package.

The CLI maps these to stable exit codes: ConfigError -> 1 (usage),
DataError -> 2 (bad input data), ContractError / NumericalError -> 3
(numerical or API-contract failure).
"""


class ChromaBenchError(Exception):
    """Base class for all package errors."""


class ConfigError(ChromaBenchError):
    """Invalid configuration file, flag combination, or preset."""


class DataError(ChromaBenchError):
    """Unreadable or malformed input data (images, feature files, datasets)."""


class CheckpointError(DataError):
    """Malformed checkpoint file.

    ``code`` is a stable machine-readable tag: one of ``bad_magic``,
    ``bad_version``, ``truncated``, ``shape_mismatch``.
    """

    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code


class ContractError(ChromaBenchError):
    """An API precondition was violated by the caller."""


class DimensionError(ContractError):
    """Array shapes do not satisfy an operation's contract."""


class NumericalError(ChromaBenchError):
    """Non-finite values or a failed numerical invariant."""
