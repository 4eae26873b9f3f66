class SynopticError(Exception):
    pass


class DimensionError(SynopticError, ValueError):
    """Tensor shapes do not fit together."""


class ConfigError(SynopticError, ValueError):
    """Invalid network, loss or experiment configuration."""


class FormatError(SynopticError):
    """A model, event or report file could not be parsed."""


class TrainingDiverged(SynopticError):
    """Loss became non-finite; ``last_good`` holds the last finite model."""

    def __init__(self, message, last_good=None, log=None):
        super().__init__(message)
        self.last_good = last_good
        self.log = log or []
