"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or unsatisfiable setup."""


class DataFormatError(ValueError):
    """Malformed dataset file; message carries file and record location."""
