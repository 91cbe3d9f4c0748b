"""Exception types shared across the package."""


class AVSKError(Exception):
    pass


class ContractError(AVSKError, ValueError):
    """A documented precondition was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(AVSKError, ValueError):
    """Invalid configuration. ``field`` holds the dotted path when known."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class GraphError(AVSKError, RuntimeError):
    pass


class InputError(AVSKError, ValueError):
    """Malformed data handed to a scorer or checker."""


class VocabError(ContractError):
    pass


class CapacityError(AVSKError, MemoryError):
    """Counting allocator refused an allocation (simulated out-of-memory)."""


class StateMismatchError(AVSKError, RuntimeError):
    """Checkpoint or resumed state does not match the requested config."""
