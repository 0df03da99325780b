"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration or physically meaningless input."""


class TraceError(RuntimeError):
    """A stored trace cannot be used (truncated, malformed, wrong schema)."""


class SchemaVersionError(TraceError):
    def __init__(self, found, expected):
        super().__init__(f"trace schema version {found!r} is not supported (expected {expected!r})")
        self.found = found
        self.expected = expected
