"""Exception types raised across crossdiff."""

from typing import Iterable, Optional


class CrossDiffError(Exception):
    """Base class for every error raised by crossdiff."""


class ShapeError(CrossDiffError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(CrossDiffError, ArithmeticError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, inputs: Optional[Iterable[str]] = None, detail: str = ""):
        self.op = op
        self.inputs = [name for name in (inputs or []) if name]
        message = f"Non-finite values produced by '{op}'"
        if self.inputs:
            message += f" (inputs: {', '.join(self.inputs)})"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class EmptyMaskError(CrossDiffError):
    """A mask selects no point, so no box can be derived from it."""


class ConfigError(CrossDiffError, ValueError):
    """Configuration key unknown, mistyped or inconsistent."""


class RunExistsError(CrossDiffError):
    """A completed run directory would be overwritten."""


class PackingError(CrossDiffError):
    """Scene objects could not be placed without overlap."""


class TemplateError(CrossDiffError):
    """No expression template applies to the requested target."""


class LLMUnavailableError(CrossDiffError):
    """The language-model backend could not be reached."""


class LLMParseError(CrossDiffError):
    """The language-model backend answered with something other than yes/no."""
