"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the operation's mathematical domain."""


class DegenerateInputError(DomainError):
    """Input is well-formed but carries no information (e.g. a constant series)."""


class StructuralError(ValueError):
    """Shapes, lengths or cached intermediates do not fit together."""


class StateError(RuntimeError):
    """An object is used before reaching the state the operation needs."""


class ComparabilityError(ValueError):
    """Embeddings produced under different probes were mixed."""


class IdxParseError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset
        self.path = path


class ConfigError(ValueError):
    """Invalid sweep configuration document."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if key is not None:
            parts.append(f"key '{key}'")
        prefix = ", ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.key = key
        self.line = line
