"""Exception hierarchy shared by the engine and the CLI."""

from typing import Any


class MfclabError(Exception):
    """Base class for every error raised by mfclab."""


# --- Model definition ---


class UnknownModel(MfclabError, KeyError):
    pass


class InvalidParam(MfclabError, ValueError):
    pass


class InvalidModel(MfclabError, ValueError):
    """Raised at construction when exponents, dimensions or horizon are inadmissible."""


class NonFiniteCoefficient(MfclabError, ArithmeticError):
    pass


# --- Measures and transport ---


class DimensionMismatch(MfclabError, ValueError):
    pass


class SizeMismatch(MfclabError, ValueError):
    pass


class CapExceeded(MfclabError, ValueError):
    """The exact solver refuses inputs above its configured atom cap."""


class GridMismatch(MfclabError, ValueError):
    pass


# --- Controls ---


class InvalidControl(MfclabError, ValueError):
    pass


class ActionOutOfSet(InvalidControl):
    pass


class RefinementTooCoarse(MfclabError, ValueError):
    pass


class NotPSD(MfclabError, ArithmeticError):
    pass


# --- Simulation / optimization ---


class NoConvergence(MfclabError, ArithmeticError):
    """Iteration budget exhausted. ``result`` carries the best value reached."""

    def __init__(self, message: str, result: Any = None):
        super().__init__(message)
        self.result = result


class NumericalBlowup(MfclabError, ArithmeticError):
    """A state exceeded the blowup threshold. ``output`` carries the partial run."""

    def __init__(self, message: str, output: Any = None):
        super().__init__(message)
        self.output = output


class NotLQ(MfclabError, ValueError):
    pass


class RiccatiBlowup(MfclabError, ArithmeticError):
    pass


class AllCandidatesBlewUp(MfclabError, ArithmeticError):
    pass


# --- Configuration ---


class ConfigError(MfclabError, ValueError):
    pass
