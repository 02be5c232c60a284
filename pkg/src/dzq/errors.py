"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid experiment configuration (bad file, unknown key, bad value)."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(Exception):
    """A binary artifact (IDX file, checkpoint) does not match its format."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, step=None, loss=None):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(message)
