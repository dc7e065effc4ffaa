"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array geometry does not match what an operation requires."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class ValidationError(ValueError):
    """Data loaded from disk violates a type invariant."""


class SchemaError(ValueError):
    """A file or checkpoint carries an incompatible schema or config."""
