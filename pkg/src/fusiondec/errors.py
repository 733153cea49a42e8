"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Inconsistent models, symbol tables or settings."""


class InputError(ValueError):
    """Malformed or out-of-range input data."""


class ArpaFormatError(InputError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class TrainingDivergenceError(RuntimeError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}")
