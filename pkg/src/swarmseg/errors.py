"""Exception types shared across the package."""


class SwarmSegError(Exception):
    """Base class for all package errors."""


class ConfigError(SwarmSegError):
    """Shapes, dimensions or settings are inconsistent."""


class DataError(SwarmSegError):
    """Input data is malformed or out of range."""


class GenerationError(SwarmSegError):
    """Procedural generation could not satisfy its constraints."""
