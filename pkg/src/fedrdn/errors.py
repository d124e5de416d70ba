"""Exception hierarchy shared by the simulator."""


class FedRDNError(Exception):
    """Base class for every error raised by the package."""


class MisuseError(FedRDNError, ValueError):
    """An operation was called with arguments violating its contract."""


class ConfigError(FedRDNError, ValueError):
    """Invalid configuration. ``field`` holds the dotted path when known."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class FormatError(FedRDNError, ValueError):
    """Malformed binary dataset file."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class DegenerateStatsError(FedRDNError, ValueError):
    """Normalization requested with a standard deviation below the floor."""


class ProtocolError(FedRDNError, RuntimeError):
    """The statistics exchange received an inconsistent set of messages."""


class NonFiniteError(FedRDNError, FloatingPointError):
    """NaN or Inf detected in a tensor."""


class ExperimentError(FedRDNError, RuntimeError):
    """A sub-operation failed inside a run; carries round and client context."""

    def __init__(self, message: str, round_index: int | None = None, client_id: int | None = None):
        self.round_index = round_index
        self.client_id = client_id
        where = []
        if round_index is not None:
            where.append(f"round {round_index}")
        if client_id is not None:
            where.append(f"client {client_id}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
