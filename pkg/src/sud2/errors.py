class ConfigError(ValueError):
    """Invalid experiment configuration (bad key, missing file, impossible shape)."""


class NumericalError(RuntimeError):
    """A loss or network output became non-finite."""
