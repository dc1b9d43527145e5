"""Error classes mapped to distinct CLI exit codes."""


class ProxyflowError(Exception):
    pass


class ConfigError(ProxyflowError):
    exit_code = 2


class DataError(ProxyflowError):
    exit_code = 3


class TrainingDiverged(ProxyflowError):
    """Loss went non-finite; the last good checkpoint is preserved."""

    exit_code = 4

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
