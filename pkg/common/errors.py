"""
Exception hierarchy for Landmatch
Each family maps to one process exit code in common.cli
"""


class LandmatchError(Exception):
    """Base class for all toolkit errors"""


class ConfigError(LandmatchError):
    """Unknown key, type mismatch or invalid value in a run configuration"""


class DataError(LandmatchError):
    """Missing, partial or unreadable input data"""


class ImageFormatError(DataError):
    """Unsupported or non-grayscale image file"""


class CheckpointError(DataError):
    """Missing checkpoint or checkpoint that does not match its config"""


class NumericError(LandmatchError):
    """Non-finite values surfaced from a numeric computation"""

    def __init__(self, message: str, component: str = None):
        super().__init__(message)
        self.component = component


class TrainingDivergedError(NumericError):
    """Training produced a non-finite loss; the last good checkpoint is kept"""

    def __init__(self, message: str, component: str = None, last_checkpoint: str = None):
        super().__init__(message, component)
        self.last_checkpoint = last_checkpoint
