"""Exception types raised across the package."""


class VarSlamError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(VarSlamError, ValueError):
    pass


class NumericalError(VarSlamError, ArithmeticError):
    pass


class ObservabilityError(VarSlamError):
    """Too few usable observations to constrain the unknowns."""


class StructuralError(VarSlamError):
    """Malformed optimization problem (dangling references, disconnected graph)."""


class TrajectoryParseError(VarSlamError, ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class AssociationError(VarSlamError):
    pass


class AlignmentError(VarSlamError):
    pass


class ConfigError(VarSlamError, ValueError):
    pass
