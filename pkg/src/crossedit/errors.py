"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CrossEditError(Exception):
    """Base class for all package errors."""


class DataError(CrossEditError):
    """Problems with dataset files or case files."""


class MalformedRecord(DataError):
    """A dataset line is not a syntactically valid record."""


class SchemaViolation(DataError):
    """A record parses but breaks a field invariant."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class MissingLanguage(DataError):
    def __init__(self, case_id: str, lang: str):
        self.case_id = case_id
        self.lang = lang
        super().__init__(f"case {case_id!r} has no data for language {lang!r}")


class AllCasesSkipped(DataError):
    """Every case lacked probes for the requested metric."""


class EmptyCases(DataError):
    pass


class DuplicateKey(DataError):
    pass


class EmptyGold(ValueError):
    pass


class ModelError(CrossEditError):
    pass


class ContextOverflow(ModelError):
    def __init__(self, length: int, limit: int):
        self.length = length
        self.limit = limit
        super().__init__(f"sequence of {length} tokens exceeds context limit {limit}")


class NonPositiveTemperature(ModelError, ValueError):
    pass


class ModelLoadError(ModelError):
    pass


class CheckpointMismatch(ModelLoadError):
    pass


class EmptyBatch(ValueError):
    pass


class OverLength(ValueError):
    pass


class DivergedLoss(RuntimeError):
    pass


class ServiceError(CrossEditError):
    """The chat service failed after all retries."""


class EmptyCompletion(ServiceError):
    pass


class ParseError(CrossEditError):
    pass


class ScoreParseError(ParseError):
    pass


class JudgeAmbiguous(ParseError):
    pass


class UnsupportedPair(CrossEditError):
    pass


class EmptyResponses(ValueError):
    pass


class ConfigError(CrossEditError):
    pass


class QuotaShortfall(UserWarning):
    """Fewer samples were produced than a quota asked for."""
