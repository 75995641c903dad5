class S4LFSCError(Exception):
    """Base class for all pipeline errors"""


class FormatError(S4LFSCError, ValueError):
    """Container layout does not match its descriptor"""


class DataError(S4LFSCError, ValueError):
    """Payload values violate a data invariant (e.g. non-finite reflectance)"""


class SplitError(S4LFSCError, ValueError):
    """A class cannot satisfy the requested subsample or split"""


class ConfigError(S4LFSCError, ValueError):
    """Invalid configuration value"""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class ShapeError(S4LFSCError, ValueError):
    """Tensor or array shape does not match the expected contract"""


class EpisodeError(S4LFSCError, ValueError):
    """Pool cannot supply the requested episode"""

    def __init__(self, message: str, class_id: int | None = None):
        super().__init__(message)
        self.class_id = class_id


class CheckpointError(S4LFSCError):
    """Tensor archive manifest and payload are inconsistent"""


class TransferError(S4LFSCError):
    """Required parameters could not be transferred under strict mode"""


class ContractError(S4LFSCError, ValueError):
    """Function precondition violated"""


class MetricError(S4LFSCError, ValueError):
    """Metric inputs are empty or incomplete"""


class RenderError(S4LFSCError, ValueError):
    """Classification map cannot be rendered"""
