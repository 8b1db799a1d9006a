"""Exception hierarchy shared across the benchmark."""

from __future__ import annotations


class XrayBenchError(Exception):
    """Base class for every error raised by xraybench."""


class ConfigError(XrayBenchError, ValueError):
    pass


class ModelNotFoundError(XrayBenchError, FileNotFoundError):
    pass


class InputFormatError(XrayBenchError, ValueError):
    """Image bytes could not be decoded as PNG or JPEG."""


class BackendError(XrayBenchError, RuntimeError):
    def __init__(self, model_id: str, message: str):
        super().__init__(f"[{model_id}] {message}")
        self.model_id = model_id


class CapabilityError(XrayBenchError):
    """A handle was asked for something it cannot produce (e.g. embeddings)."""


class TemplateError(XrayBenchError, ValueError):
    pass


class LLMError(XrayBenchError):
    pass


class AuthenticationError(LLMError):
    pass


class EndpointTimeoutError(LLMError):
    """Raised once transient transport failures exhaust the retry budget."""


class MalformedResponseError(LLMError):
    pass


class ParseError(XrayBenchError, ValueError):
    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


class InconsistentProbabilitiesError(ParseError):
    pass


class KnowledgeBaseError(XrayBenchError):
    pass


class BuildError(KnowledgeBaseError):
    pass


class EmptyInputError(XrayBenchError, ValueError):
    pass


class RunAbortedError(XrayBenchError):
    pass


class ReportError(XrayBenchError):
    pass


class UnknownProfileError(XrayBenchError, LookupError):
    pass
