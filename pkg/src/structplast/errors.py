"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, NumericFault -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration, shape mismatch or inconsistent plan."""


class NumericFault(ArithmeticError):
    """A non-finite value appeared during a forward/backward/optimizer step."""

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class StructuralEditError(RuntimeError):
    """A mask edit violated its preconditions (signals a scheduler bug)."""


class DataFormatError(ValueError):
    """Malformed IDX / CIFAR binary input."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} at byte offset {offset}")
        self.offset = offset
