"""Exception types raised across the simulator."""


class FedEMAError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(FedEMAError, ValueError):
    pass


class DimensionError(FedEMAError, ValueError):
    pass


class ConfigError(FedEMAError, ValueError):
    pass


class OracleError(FedEMAError, ArithmeticError):
    pass


class OptimizerError(FedEMAError, ArithmeticError):
    pass


class InvalidWeightsError(FedEMAError, ValueError):
    pass


class InvalidLabelError(FedEMAError, ValueError):
    pass


class RoundRangeError(FedEMAError, IndexError):
    pass


class NotApplicableError(FedEMAError, ValueError):
    pass


class CheckpointError(FedEMAError, ValueError):
    pass


class RoundError(FedEMAError, RuntimeError):
    """A round aborted; carries the round index and the underlying cause."""

    def __init__(self, round_index: int, cause: BaseException):
        super().__init__(f"round {round_index} failed: {cause}")
        self.round_index = round_index
        self.cause = cause
