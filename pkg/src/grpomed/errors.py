"""Exception types shared across the package."""


class GrpoMedError(Exception):
    pass


class ConfigError(GrpoMedError, ValueError):
    """Invalid configuration or mismatched dimensions."""


class UsageError(GrpoMedError, RuntimeError):
    """An operation was called in a state where it is not allowed."""


class ContractViolation(GrpoMedError, ValueError):
    """A caller-supplied closure broke its contract (e.g. an invalid distribution)."""


class DivergenceError(GrpoMedError, FloatingPointError):
    def __init__(self, iteration, detail=""):
        self.iteration = iteration
        msg = f"non-finite parameters at iteration {iteration}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class CheckInvalid(GrpoMedError, RuntimeError):
    """Gradient check could not run (e.g. non-deterministic closure)."""
