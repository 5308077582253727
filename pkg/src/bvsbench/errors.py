"""Exception hierarchy shared across the bench."""


class BenchError(Exception):
    """Base class for all bench failures."""


class ConfigError(BenchError):
    """Invalid or inconsistent configuration (bad value, unknown key, broken invariant)."""


class GeometryError(BenchError):
    """Grids, mappings or streams that do not fit together."""


class FormatError(BenchError):
    """Malformed container file (bad magic, truncated payload, wrong sizes)."""


class ProtocolPreconditionError(BenchError):
    """A characterization protocol was invoked outside its stated preconditions.

    Mapped to CLI exit code 2.
    """


class MetricUndefinedError(BenchError):
    """The requested metric does not exist for this data (e.g. SNR never crosses 0 dB).

    Mapped to CLI exit code 3.
    """
