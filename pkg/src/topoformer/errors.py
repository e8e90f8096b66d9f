"""Exception hierarchy shared by every module of the package."""


class TopoformerError(Exception):
    """Base class for all package errors."""


class DimensionError(TopoformerError, ValueError):
    """Tensor or vector shapes are incompatible."""


class ConfigurationError(TopoformerError, ValueError):
    """A layer, model or run configuration violates an invariant."""


class ContractError(TopoformerError, RuntimeError):
    """A caller broke an operation's precondition."""


# data pipeline


class SchemaError(TopoformerError, ValueError):
    """A CSV input is missing a required column."""


class InvariantError(TopoformerError, ValueError):
    """A domain record violates one of its invariants."""


class NotAnchorableError(TopoformerError, ValueError):
    """A profile never crosses 0 m so its chainage cannot be anchored."""


class UnusableProfileError(TopoformerError, ValueError):
    """A profile never reaches MLWN and cannot be resampled."""


class DegenerateStatisticsError(TopoformerError, ValueError):
    """Normalization statistics have zero spread."""


class InsufficientDataError(TopoformerError, ValueError):
    """Too few examples for the requested operation."""


class DomainError(TopoformerError, ValueError):
    """An argument lies outside the operation's domain."""


class InsufficientHistoryError(TopoformerError, ValueError):
    """No complete historical survey is available to build a reference."""


# checkpoints and training


class FormatError(TopoformerError, ValueError):
    """Checkpoint manifest is malformed or incompatible."""


class IntegrityError(TopoformerError, ValueError):
    """Checkpoint payload is truncated or fails its checksum."""


class DivergedTrainingError(TopoformerError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}: non-finite loss")
