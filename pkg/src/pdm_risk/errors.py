"""Exception hierarchy shared by every stage of the pipeline."""


class PdmError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(PdmError, ValueError):
    pass


class ParseError(PdmError, ValueError):
    pass


class StructureError(PdmError, ValueError):
    pass


class IntegrityError(PdmError, ValueError):
    pass


class ContractError(PdmError, ValueError):
    pass


class DegenerateDataError(PdmError, ValueError):
    pass


class StatsError(PdmError, ValueError):
    pass


class NumericError(PdmError, ArithmeticError):
    pass


class ConfigError(PdmError, ValueError):
    pass


class StageError(PdmError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
