"""Typed errors raised by the numerical modules and the config layer."""


class LabError(Exception):
    """Base class for every error the laboratory raises on purpose."""


class ParameterDomainError(LabError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class MomentOrderError(LabError, ValueError):
    pass


class NumericalError(LabError, ArithmeticError):
    def __init__(self, message: str, *, alpha: float | None = None):
        super().__init__(message)
        self.alpha = alpha


class GapFailureError(NumericalError):
    pass


class DegenerateDataError(LabError, ValueError):
    pass


class DataQualityError(LabError):
    pass


class ConfigError(LabError, ValueError):
    def __init__(self, message: str, *, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where = f"`{key}`"
            if line is not None:
                where += f" (line {line})"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.key = key
        self.line = line


class SchemaError(LabError, ValueError):
    def __init__(self, message: str, *, column: str | None = None):
        super().__init__(f"column `{column}`: {message}" if column else message)
        self.column = column
