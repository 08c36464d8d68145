"""Exception types raised across the package."""


class SemflError(Exception):
    pass


class DimensionError(SemflError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(SemflError, ValueError):
    """A scalar hyper-parameter is outside its admissible range."""


class ContractError(SemflError, ValueError):
    """A caller violated an operation's precondition."""


class DivergedError(SemflError, FloatingPointError):
    """Local training produced a non-finite loss."""

    def __init__(self, message, *, round_index=None, epoch=None):
        super().__init__(message)
        self.round_index = round_index
        self.epoch = epoch


class EmptyRoundError(SemflError, RuntimeError):
    """No device is eligible to take part in a round."""

    def __init__(self, round_index):
        super().__init__(f"round {round_index}: every device exceeded the delay budget or diverged")
        self.round_index = round_index


class IngestionError(SemflError, OSError):
    """A dataset or image file could not be read."""


class ConfigError(SemflError, ValueError):
    """A configuration file is malformed."""
