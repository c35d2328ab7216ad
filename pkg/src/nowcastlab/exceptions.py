class NowcastError(Exception):
    """Base class for errors raised by nowcastlab."""


class InvalidInputError(NowcastError, ValueError):
    pass


class ShapeError(InvalidInputError):
    pass


class ConfigurationError(NowcastError, ValueError):
    pass


class OutOfBoundsError(InvalidInputError):
    pass


class DegenerateStatsError(InvalidInputError):
    pass


class CorruptDatasetError(NowcastError):
    """A dataset or checkpoint file failed validation."""

    def __init__(self, message, path=None, offset=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if offset is not None:
                where += f" @ offset {offset}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.offset = offset


class CountMismatchError(CorruptDatasetError):
    pass


class TrainingDivergedError(NowcastError):
    def __init__(self, message, epoch=None, checkpoint=None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint
