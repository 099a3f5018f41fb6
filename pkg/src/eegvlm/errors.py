"""Exception hierarchy.

``ValidationError`` subclasses signal bad input or configuration (CLI exit
code 1); everything else deriving from ``EEGVLMError`` is a runtime failure
(exit code 2).
"""


class EEGVLMError(Exception):
    pass


class ValidationError(EEGVLMError, ValueError):
    pass


# edf ingest
class MalformedHeader(ValidationError):
    pass


class InconsistentSpec(ValidationError):
    pass


class TruncatedData(ValidationError):
    pass


class ChannelNotFound(ValidationError, KeyError):
    pass


class AmbiguousChannel(ValidationError):
    pass


class UnknownStageText(ValidationError):
    pass


# preprocess
class InvalidSpec(ValidationError):
    pass


class EmptySignal(ValidationError):
    pass


# render
class DegenerateEpoch(ValidationError):
    pass


# vision / alignment / lm
class ShapeMismatch(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class NonFiniteLoss(EEGVLMError):
    pass


class InvalidP(ValidationError):
    pass


class EncoderUnavailable(EEGVLMError):
    pass


class ModelUnavailable(EEGVLMError):
    pass


class NoStageFound(EEGVLMError):
    pass


# cot
class MissingProfile(ValidationError):
    pass


class ServiceUnavailable(EEGVLMError):
    pass


class TransientServiceError(EEGVLMError):
    """Retryable failure raised by a VLM client (rate limit, 5xx, timeout)."""


class MalformedResponse(EEGVLMError):
    pass


class MissingAnalysis(ValidationError):
    pass


class NoDecidableLabel(EEGVLMError):
    pass


class InsufficientData(ValidationError):
    pass


# evaluation
class InsufficientClass(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class UnknownLabel(ValidationError):
    pass


class EmptyMatrix(ValidationError):
    pass


class DegenerateKappa(EEGVLMError):
    pass


class IoFailure(EEGVLMError):
    pass


# cli
class ConfigInvalid(ValidationError):
    pass


class MissingUpstream(EEGVLMError):
    pass
