"""Exception hierarchy shared by all stages."""


class MtfsError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(MtfsError, ValueError):
    """Inputs have inconsistent shapes or violate a precondition."""


class ValidationError(MtfsError, ValueError):
    """Inputs contain values outside their domain (NaN, Inf, bad labels)."""


class DivergenceError(MtfsError, ArithmeticError):
    def __init__(self, iteration, value):
        super().__init__(f"objective became non-finite ({value!r}) at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class UnsupportedFormatError(MtfsError, ValueError):
    """Capture file is not a little/big-endian microsecond Ethernet pcap."""


class CaptureParseError(MtfsError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DegenerateModelError(MtfsError, ValueError):
    """Training data contains a single class."""


class StratificationError(MtfsError, ValueError):
    """Too few examples of a class to build the requested folds."""


class UnknownDetectorError(MtfsError, KeyError):
    pass


class PipelineError(MtfsError):
    """Wraps an error raised inside an experiment stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
