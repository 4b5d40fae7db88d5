"""Exception types shared across the package."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values (divergent training,
    exploding integration, bad learning rate)."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class InstanceGenerationError(RuntimeError):
    """Could not draw a valid task instance (stability filter exhausted)."""
