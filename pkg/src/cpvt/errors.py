"""Exception types raised across the package."""


class CPVTError(Exception):
    pass


class ShapeError(CPVTError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CPVTError, ValueError):
    """A documented precondition of an operation does not hold."""


class ConfigError(CPVTError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ResolutionError(CPVTError, ValueError):
    """Token grid differs from the one a learnable position table was built for."""


class DeterminismError(CPVTError, RuntimeError):
    pass


class CorruptionError(CPVTError, IOError):
    pass


class VersionError(CPVTError, IOError):
    pass


class DivergenceError(CPVTError, RuntimeError):
    """Training produced a non-finite loss."""
