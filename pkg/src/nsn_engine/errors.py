# src/nsn_engine/errors.py
from __future__ import annotations

from pathlib import Path


class NsnError(Exception):
    """Root of every domain error; the CLI maps it to exit status 1."""


class LabelParseError(NsnError, ValueError):
    def __init__(self, path: str | Path, line_no: int, reason: str) -> None:
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class LabelNotFoundError(NsnError, FileNotFoundError):
    pass


class ManifestError(NsnError, ValueError):
    pass


class ImageSizeError(NsnError, ValueError):
    pass


class DegenerateBoxError(NsnError, ValueError):
    pass


class PlacementError(NsnError, ValueError):
    pass


class PoissonConvergenceError(NsnError, ArithmeticError):
    def __init__(self, residual: float, iterations: int) -> None:
        self.residual = float(residual)
        self.iterations = int(iterations)
        super().__init__(
            f"conjugate gradient stopped at relative residual {residual:.3e} after {iterations} iterations"
        )


class ConfigurationError(NsnError, ValueError):
    pass


class UndefinedGainError(NsnError, ZeroDivisionError):
    pass


class DetectionInputError(NsnError, ValueError):
    pass


class AugmentationError(NsnError, RuntimeError):
    pass


class StageFailure(NsnError, RuntimeError):
    def __init__(self, stage: str, message: str, stdout: str = "", stderr: str = "") -> None:
        self.stage = stage
        self.stdout = stdout
        self.stderr = stderr
        super().__init__(f"stage {stage} failed: {message}")


class NonFiniteLossError(NsnError, ArithmeticError):
    pass
