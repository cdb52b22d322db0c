"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with a resampling factor or pyramid depth."""


class ConfigError(ValueError):
    """Raised for invalid schedules, stage plans, or run configurations."""

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class RoutingError(LookupError):
    """Raised when no expert covers a (level, sigma) query."""


class FormatError(OSError, ValueError):
    """Raised for malformed image or model files; counts as an I/O error."""
