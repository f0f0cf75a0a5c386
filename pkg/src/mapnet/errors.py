"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, data
problems exit 2, numerical aborts exit 3.
"""


class ConfigError(ValueError):
    """Invalid run configuration or architecture description.

    ``errors`` holds every violation found as ``(dotted.key, message)`` pairs.
    """

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = list(errors or [])


class ContractError(ValueError):
    """Arguments violate an operation's shape or length contract."""


class DataError(ValueError):
    """Dataset contents are unusable (bad labels, non-numeric cells, missing split)."""


class FormatError(DataError):
    """A binary file does not follow its documented layout."""


class PretrainedImportError(FormatError):
    """Pretrained weights do not match their manifest."""


class NumericalAbort(FloatingPointError):
    """Training produced a non-finite loss; ``dump`` carries the diagnostics."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
