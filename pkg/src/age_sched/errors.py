"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


class InfeasibleError(RuntimeError):
    """No policy can satisfy the constraints / no sign-changing bracket exists."""


class ConvergenceError(RuntimeError):
    """An iterative routine exhausted its budget without meeting its tolerance."""
