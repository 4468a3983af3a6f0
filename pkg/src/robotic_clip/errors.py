"""Exception types raised across the pipeline."""


class RoboticClipError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class EmptyPrompt(RoboticClipError, ValueError):
    pass


class TaggerFailure(RoboticClipError):
    pass


class SegmenterFailure(RoboticClipError):
    pass


class ShapeMismatch(RoboticClipError, ValueError):
    pass


class NoRecords(RoboticClipError):
    pass


class TooFewFrames(RoboticClipError, ValueError):
    pass


class DuplicateVideoInBatch(RoboticClipError, ValueError):
    pass


class IneligibleEntry(RoboticClipError, ValueError):
    pass


class ZeroNormEmbedding(RoboticClipError, ArithmeticError):
    pass


class NonFiniteLoss(RoboticClipError, ArithmeticError):
    def __init__(self, message: str, video_ids=()):
        super().__init__(message)
        self.video_ids = list(video_ids)


class ProfileMismatch(RoboticClipError, ValueError):
    pass


class CheckpointError(RoboticClipError):
    pass


class ConfigError(RoboticClipError, ValueError):
    pass
