"""Exception hierarchy shared by every neglab module."""


class NeglabError(Exception):
    """Base class for all errors raised by neglab."""


class ShapeError(NeglabError, ValueError):
    """Tensor dimensions do not line up."""


class NonFiniteError(NeglabError, FloatingPointError):
    """A kernel produced NaN or Inf."""


class ContainerError(NeglabError):
    """Malformed, incomplete or inconsistent tensor container."""


class TokenizerError(NeglabError):
    pass


class PlanError(NeglabError, ValueError):
    """Invalid or conflicting intervention plan."""


class DataError(NeglabError):
    """Problem with dataset contents (corpus validation, degenerate answers)."""


class CorpusError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConfigError(NeglabError):
    """Bad experiment or endpoint configuration."""


class NetworkError(NeglabError):
    """Chat endpoint unreachable or returned an error after all retries."""


class EvidenceParseError(DataError):
    """Annotator response does not contain a valid evidence list."""
