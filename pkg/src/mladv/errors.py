"""Exception types shared across the package."""


class UsageError(ValueError):
    """Invalid arguments, shapes or configuration."""


class PreconditionError(UsageError):
    """An attack premise does not hold (e.g. the clean input is misclassified)."""


class ParseError(ValueError):
    """Malformed model, dataset or results file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
