"""Exception hierarchy shared by every module."""


class GenDenoiseError(Exception):
    """Base class for all library errors."""


class ParameterError(GenDenoiseError, ValueError):
    """A numeric parameter lies outside its valid domain."""


class ScheduleSizeError(ParameterError):
    pass


class ConfigurationError(GenDenoiseError, ValueError):
    """Inputs are individually valid but inconsistent with each other."""


class ShapeError(GenDenoiseError, ValueError):
    pass


class ContractError(GenDenoiseError, ValueError):
    """A caller broke an interface contract (e.g. missing x_N for Poisson)."""


class DegenerateEvidenceError(GenDenoiseError, ValueError):
    pass


class TrainingDivergedError(GenDenoiseError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class TestConfigurationError(GenDenoiseError, ValueError):
    __test__ = False  # keep pytest from collecting this


class FormatError(GenDenoiseError, ValueError):
    """Malformed or unsupported file content."""
