"""Error types shared across the package.

Each class carries an ``exit_code`` so the CLI can map failures onto a
categorized process status.
"""


class GazeViTError(Exception):
    exit_code = 1


class InvalidParameterError(GazeViTError, ValueError):
    exit_code = 2


class MissingDataError(GazeViTError, LookupError):
    exit_code = 3


class DegenerateSplitError(GazeViTError, ValueError):
    exit_code = 4


class TrainingDivergedError(GazeViTError, RuntimeError):
    exit_code = 5

    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class AuditViolationError(GazeViTError, RuntimeError):
    """Raised when a data access breaks the train/test or inference contract."""

    exit_code = 6
