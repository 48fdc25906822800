"""Exception types raised across the pipeline."""


class PipelineError(Exception):
    """Base class for every error this package raises on purpose."""


class InvalidConfig(PipelineError, ValueError):
    pass


# audio / features
class UnreadableAudio(PipelineError):
    pass


class UnsupportedEncoding(PipelineError):
    pass


class ZeroLengthAudio(PipelineError):
    pass


class SampleRateMismatch(PipelineError, ValueError):
    pass


class DegenerateFilter(PipelineError, ValueError):
    pass


class FeatureFormatError(PipelineError):
    pass


class MissingFeatures(PipelineError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class FeatureExtractionFailed(PipelineError):
    def __init__(self, failures: dict[str, str]):
        self.failures = dict(failures)
        listed = ", ".join(sorted(self.failures))
        super().__init__(f"feature extraction failed for {len(self.failures)} utterance(s): {listed}")


# corpus
class MalformedRow(PipelineError, ValueError):
    pass


class DuplicateUtterance(PipelineError, ValueError):
    pass


class DanglingSpeaker(PipelineError, ValueError):
    pass


class SpeakerNotFound(PipelineError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class UnknownUtterance(PipelineError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class TierMismatch(PipelineError, ValueError):
    pass


class InsufficientFiles(PipelineError, ValueError):
    pass


class SpeakerLeakage(PipelineError, ValueError):
    pass


# model / lora / checkpoints
class ShapeMismatch(PipelineError, ValueError):
    pass


class BackwardWithoutForward(PipelineError, RuntimeError):
    pass


class RankTooLarge(PipelineError, ValueError):
    pass


class VersionMismatch(PipelineError):
    pass


class CorruptIndex(PipelineError):
    pass


class CorruptBlob(PipelineError):
    pass


# training / evaluation
class NonFiniteLoss(PipelineError, FloatingPointError):
    pass


class LabelOutOfRange(PipelineError, ValueError):
    pass


class EmptyMatrix(PipelineError, ValueError):
    pass
