"""
Error types shared by every module. Each carries the exit code the CLI maps it to.
"""


class SafetaxError(Exception):
    exit_code = 1


class InputError(SafetaxError, ValueError):
    "malformed or missing input: files, flags, scenarios"

    exit_code = 2


class ConfigError(InputError):
    pass


class ContainerError(InputError):
    pass


class AdapterError(InputError):
    pass


class ScenarioError(InputError):
    pass


class EvalLogError(InputError):

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(SafetaxError, ValueError):
    exit_code = 3


class NumericError(SafetaxError, ArithmeticError):
    exit_code = 4


class DegenerateNormError(NumericError):
    pass


class ConvergenceError(NumericError):

    def __init__(self, message: str, iterate=None, residual: float = float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.iterate = iterate
        self.residual = residual


class TrainingDivergedError(NumericError):

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss
