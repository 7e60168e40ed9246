"""Exception hierarchy shared across the package.

The CLI maps the three top-level families to exit codes 2, 3 and 4.
"""


class CilabError(Exception):
    exit_code = 1


class ConfigError(CilabError, ValueError):
    exit_code = 2


class ProtocolError(CilabError):
    exit_code = 3


class PersistenceError(CilabError):
    exit_code = 4


class DimensionError(CilabError, ValueError):
    pass


class DegenerateInputError(CilabError, ValueError):
    pass


class ContractError(CilabError):
    pass


class SnapshotError(CilabError):
    pass


class StreamStarvationError(ProtocolError):
    """A continuous batch cannot yield valid training tuples."""


class HistoryAccessError(ProtocolError):
    """A released continuous batch was accessed again."""
