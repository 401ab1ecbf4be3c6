"""Exception hierarchy. Everything user-facing derives from ``FedVolError``."""


class FedVolError(Exception):
    pass


class FormatError(FedVolError, ValueError):
    """Input bytes do not follow the expected file layout."""


class ValidationError(FedVolError, ValueError):
    """A value violates a domain invariant (positivity, shape, finiteness)."""


class SizeError(FedVolError, ValueError):
    """Not enough (or too many) elements for the requested operation."""


class ParameterError(FedVolError, ValueError):
    """An argument is outside its admissible range."""


class PreconditionError(FedVolError, ValueError):
    pass


class ConfigError(FedVolError, ValueError):
    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line


class VerificationError(FedVolError, RuntimeError):
    """A runtime property check failed; ``check`` names which one."""

    def __init__(self, check, message):
        super().__init__(f"{check}: {message}")
        self.check = check
