"""Typed errors raised across the package.

Names are part of the CLI contract: failures print ``<ErrorName>: message``
on stderr, so keep them stable.
"""


class RAMFError(Exception):
    """Base class for every error raised by this package."""


class MissingRecord(RAMFError, LookupError):
    pass


class ShapeMismatch(RAMFError, ValueError):
    pass


class CorruptPayload(RAMFError, ValueError):
    pass


class NonFiniteValue(RAMFError, ValueError):
    pass


class InvalidTarget(RAMFError, ValueError):
    pass


class TooFewSamples(RAMFError, ValueError):
    pass


class MissingModality(RAMFError, LookupError):
    pass


class UnknownVariant(RAMFError, ValueError):
    pass


class OddHeadCount(RAMFError, ValueError):
    pass


class NonFiniteLogit(RAMFError, FloatingPointError):
    pass


class IndexOutOfRange(RAMFError, IndexError):
    pass


class VariantWithoutLayer2(RAMFError, ValueError):
    pass


class DivergedLoss(RAMFError, FloatingPointError):
    pass


class EmptyTestSet(RAMFError, ValueError):
    pass


class MissingPlaceholder(RAMFError, LookupError):
    pass


class BackendUnavailable(RAMFError, ConnectionError):
    pass


class EmptyResponse(RAMFError, ValueError):
    pass


class CacheCorruption(RAMFError, ValueError):
    pass


class UnparseableVerdict(RAMFError, ValueError):
    def __init__(self, reply: str):
        super().__init__(f"expected '0' or '1', got {reply!r}")
        self.reply = reply


class WrongFrameCount(RAMFError, ValueError):
    pass
