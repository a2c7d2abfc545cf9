"""Exception hierarchy shared across the toolkit."""


class VitPadError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(VitPadError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(VitPadError):
    """Model configuration or parameter set is inconsistent."""


class FormatError(VitPadError):
    """A file does not follow its documented layout."""


class CorruptionError(FormatError):
    """A file follows the layout but its payload is truncated or inconsistent."""


class GeometryError(VitPadError):
    """Degenerate or out-of-bounds landmark geometry."""


class ArgumentError(VitPadError):
    """An argument value is outside the operation's contract."""


class ProtocolError(VitPadError):
    """A protocol fold violates what the operation requires."""


class MetricError(VitPadError):
    """A score set lacks the classes a metric needs."""


class ContractError(VitPadError):
    """An internal precondition between modules was violated."""


class TrainingDiverged(VitPadError):
    """Loss became non-finite during training."""


class VitPadIOError(VitPadError):
    """File read/write failed; message names the offending path or sample."""
