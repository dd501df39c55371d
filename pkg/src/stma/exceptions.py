"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class DimensionError(ContractError):
    """Tensor shapes do not agree."""


class UnknownLeafError(ContractError, KeyError):
    """A tensor was requested from a tape that never saw it."""

    def __str__(self):
        return ValueError.__str__(self)
