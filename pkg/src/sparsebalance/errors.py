class ConfigError(ValueError):
    """Invalid configuration or input data. ``field`` names the offending key when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class PlanError(ValueError):
    """A packing plan does not match the samples it is applied to."""
