"""Exception types shared across modules; the CLI maps them to exit codes."""


class DataError(ValueError):
    """Bad or inconsistent input data (corpus, images, labels, checkpoints)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during training or inference."""
