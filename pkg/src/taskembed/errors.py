"""Shared exception types. The CLI maps these onto exit codes."""


class CorpusError(ValueError):
    """Unusable corpus-level input: unreadable file, empty corpus, empty vocabulary."""


class ConfigError(ValueError):
    """Invalid configuration value or unusable config file."""


class NumericError(RuntimeError):
    """Non-finite values encountered during an optimization loop."""


class ModelIOError(ValueError):
    """Model file cannot be read; ``code`` is a stable machine-readable cause.

    Codes: ``bad_magic``, ``version_mismatch``, ``truncated_payload``,
    ``dimension_mismatch``, ``crc_mismatch``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
