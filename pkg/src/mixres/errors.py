"""Exception types shared across the package, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or usage (CLI exit code 2)."""


class DataError(Exception):
    """Dataset missing, malformed, or degenerate (CLI exit code 3)."""


class CheckpointError(Exception):
    """Unreadable checkpoint or one whose config does not match (CLI exit code 4)."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; carries epoch/batch/lr diagnostics."""

    def __init__(self, message: str, epoch: int, batch: int, lr: float):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
