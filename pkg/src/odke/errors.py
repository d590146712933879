"""Exception hierarchy shared by all pipeline stages."""


class OdkeError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(OdkeError):
    pass


class UnknownPredicate(OdkeError):
    pass


class UnknownSubject(OdkeError):
    pass


class UnknownType(OdkeError):
    pass


class RangeViolation(OdkeError):
    """A value outside the ontology; ``reason`` names the violated constraint."""

    def __init__(self, message: str, reason: str = "range"):
        super().__init__(message)
        self.reason = reason


class BudgetTooSmall(OdkeError):
    pass


class DocumentNotFound(OdkeError):
    pass


class CorruptRecord(OdkeError):
    pass


class Unnormalizable(OdkeError):
    pass


class UnparseableResponse(OdkeError):
    pass


class MissingJudgment(OdkeError):
    pass


class LlmError(OdkeError):
    pass


class TransportError(LlmError):
    """Raised after the retry budget for a provider call is exhausted."""

    retryable = True


class MissingFixture(LlmError):
    pass


class PromptTooLong(LlmError):
    pass
