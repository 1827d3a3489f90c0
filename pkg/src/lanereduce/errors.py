"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid topology, experiment or cost configuration.

    ``field`` names the offending setting so callers can report it.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class RankOutOfRange(IndexError):
    pass


class OwnershipError(RuntimeError):
    pass


class ConflictError(RuntimeError):
    pass


class ResolutionError(LookupError):
    pass


class ProtocolError(RuntimeError):
    pass


class DeadlockError(RuntimeError):
    def __init__(self, blocked: dict):
        self.blocked = blocked
        lines = [f"rank {r}: {', '.join(ops)}" for r, ops in sorted(blocked.items())]
        super().__init__("deadlock; blocked ranks:\n  " + "\n  ".join(lines))


class AliasingError(ValueError):
    pass


class UnsupportedSizeError(ValueError):
    pass


class TraceError(ValueError):
    pass
