"""Exception types shared across the package."""


class Splat4DError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(Splat4DError, ValueError):
    """A parameter is non-finite or outside its valid domain."""


class ContractError(Splat4DError, ValueError):
    """Inputs violate an operation's preconditions (shapes, sizes, flags)."""


class StateError(Splat4DError, RuntimeError):
    """An operation was applied to an object in the wrong state."""


class UndefinedMetricError(Splat4DError, ValueError):
    """A metric was requested over an empty set of valid pixels."""


class FormatError(Splat4DError, ValueError):
    """A file could not be parsed."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.path = path
        self.offset = offset
