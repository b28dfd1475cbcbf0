class ConfigError(ValueError):
    """Invalid configuration or arguments; the CLI exits with status 2."""
