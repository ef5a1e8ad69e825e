"""Exception hierarchy shared by every inrflow module."""


class INRFlowError(Exception):
    exit_code = 1


class ConfigError(INRFlowError, ValueError):
    """Invalid configuration value or unknown config key."""

    exit_code = 2


class DataError(INRFlowError, ValueError):
    """Non-finite or otherwise unusable input data."""

    exit_code = 3


class FormatError(DataError):
    """Malformed binary/text file. ``offset`` is the byte offset of the problem, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(INRFlowError, ValueError):
    """Caller violated a function precondition (shapes, ranges)."""

    exit_code = 2


class SingularityError(ContractError):
    pass


class TrainingError(INRFlowError, RuntimeError):
    exit_code = 4

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class SamplingError(INRFlowError, RuntimeError):
    exit_code = 4

    def __init__(self, message, step=None):
        if step is not None:
            message = f"sampler step {step}: {message}"
        super().__init__(message)
        self.step = step
