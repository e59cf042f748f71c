"""Exception hierarchy shared by every module."""


class MicroVLMError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(MicroVLMError, ValueError):
    pass


class NonFinite(MicroVLMError, FloatingPointError):
    pass


class OddWidth(MicroVLMError, ValueError):
    pass


class AllMasked(MicroVLMError, ValueError):
    pass


class TargetOutOfRange(MicroVLMError, IndexError):
    pass


class BadRank(MicroVLMError, ValueError):
    pass


class RankOutOfRange(MicroVLMError, ValueError):
    pass


class RankMismatch(MicroVLMError, ValueError):
    pass


class StaleCache(MicroVLMError, RuntimeError):
    """Backward was called without a matching forward."""


class EmptyAccumulator(MicroVLMError, RuntimeError):
    pass


class EmptyImage(MicroVLMError, ValueError):
    pass


class BadChannelCount(MicroVLMError, ValueError):
    pass


class NonDivisible(MicroVLMError, ValueError):
    pass


class KTooLarge(MicroVLMError, ValueError):
    pass


class ZeroNorm(MicroVLMError, ValueError):
    pass


class MissingLabels(MicroVLMError, ValueError):
    pass


class ImageFormatError(MicroVLMError, ValueError):
    pass


class EmptyCorpus(MicroVLMError, ValueError):
    pass


class EmptyQuestion(MicroVLMError, ValueError):
    pass


class EmptyVisual(MicroVLMError, ValueError):
    pass


class SequenceTooLong(MicroVLMError, ValueError):
    pass


class TooFewLabels(MicroVLMError, ValueError):
    pass


class EmptySplit(MicroVLMError, ValueError):
    pass


class DivergedLoss(MicroVLMError, FloatingPointError):
    pass


class BadMagic(MicroVLMError, ValueError):
    pass


class CheckpointIOError(MicroVLMError, OSError):
    pass


class ShapeMismatchOnLoad(MicroVLMError, ValueError):
    pass


class EmptyCandidate(MicroVLMError, ValueError):
    pass


class MalformedRecord(MicroVLMError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TeacherError(MicroVLMError, RuntimeError):
    pass


class TeacherTimeout(TeacherError):
    pass


class HttpStatus(TeacherError):
    def __init__(self, code, body=""):
        super().__init__(f"teacher returned HTTP {code}: {body[:200]}")
        self.code = code


class MissingApiKey(TeacherError):
    pass


class MockMiss(TeacherError):
    def __init__(self, key, directory):
        super().__init__(f"no mock answer for key {key} in {directory}")
        self.key = key


class EmptyImageDir(MicroVLMError, ValueError):
    pass


class ConfigError(MicroVLMError, ValueError):
    pass
