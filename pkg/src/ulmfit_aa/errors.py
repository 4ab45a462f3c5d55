"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 1, ``DataError`` -> 2,
``DivergenceError`` -> 3.
"""


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class ConfigError(ValueError):
    """Invalid configuration or usage."""


class DataError(ValueError):
    """Bad or insufficient input data (corpus, ids, checkpoints)."""


class CheckpointError(DataError):
    """Checkpoint directory is malformed or incompatible."""


class DivergenceError(ArithmeticError):
    """A loss or gradient became non-finite."""
