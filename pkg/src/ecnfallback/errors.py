"""src/ecnfallback/errors.py
Exceptions raised by ecnfallback.
"""


class EcnFallbackError(Exception):
    """Base class for every error the package raises on purpose."""


class ConfigError(EcnFallbackError):
    """A scenario, grid or parameter set failed validation."""


class ContractError(EcnFallbackError, ValueError):
    """A caller broke a documented precondition, e.g. ilog2(0)."""


class SimulationError(EcnFallbackError):
    """The simulator detected a broken invariant."""


class OutputError(EcnFallbackError):
    """Writing results failed.

    Attributes:
        path: The file that could not be written.
    """

    def __init__(self, path, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = path
