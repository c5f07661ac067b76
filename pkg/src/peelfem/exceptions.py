"""Exception types raised across the package."""


class MeshError(ValueError):
    """Invalid mesh data or a degenerate element."""


class ConfigError(ValueError):
    """Bad experiment configuration or input file."""


class NumericalError(RuntimeError):
    """A numerical stage failed (non-convergence, rank deficiency, ...)."""

