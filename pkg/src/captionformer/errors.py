"""Exception hierarchy shared by every module."""


class CaptionError(Exception):
    """Base class for all errors raised by captionformer."""


class DimensionError(CaptionError, ValueError):
    pass


class ParameterError(CaptionError, ValueError):
    pass


class ContractError(CaptionError, RuntimeError):
    pass


class ConfigError(CaptionError, ValueError):
    pass


class MaskError(CaptionError, ValueError):
    pass


class LengthError(CaptionError, ValueError):
    pass


class VocabError(CaptionError, ValueError):
    pass


class FormatError(CaptionError, ValueError):
    pass


class DataError(CaptionError, ValueError):
    pass


class ManifestError(CaptionError, ValueError):
    pass


class TrainingError(CaptionError, RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
