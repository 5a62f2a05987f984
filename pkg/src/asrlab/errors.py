"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1 (usage),
DataError -> 2, DivergenceError -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration or argument combination."""


class DataError(ValueError):
    """Invalid or missing data (corpora, manifests, checkpoints, logs)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
