"""Exception types shared across the package."""

from __future__ import annotations


class NerAnnotError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(NerAnnotError, ValueError):
    """Invalid run configuration or argument combination."""


class CorpusParseError(NerAnnotError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class BIOValidationError(NerAnnotError, ValueError):
    def __init__(self, message: str, sentence_id: int, position: int):
        super().__init__(f"sentence {sentence_id}, position {position}: {message}")
        self.sentence_id = sentence_id
        self.position = position


class ProviderError(NerAnnotError):
    """A remote provider could not be reached or kept failing."""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class ProtocolError(ProviderError):
    """The provider answered, but the payload is unusable."""


class IntegrityError(NerAnnotError):
    """Stored or returned data contradicts what was expected."""


class IndexBuildError(NerAnnotError, ValueError):
    pass


class DegenerateVectorError(NerAnnotError, ValueError):
    pass


class ParseFailure(NerAnnotError):
    """Model output did not contain any parseable entity list."""


class EvaluationError(NerAnnotError, ValueError):
    pass


class RunFailedError(NerAnnotError):
    """Too many target sentences failed during an annotation run."""
