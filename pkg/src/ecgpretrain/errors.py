"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DataError(ValueError):
    """Input data is missing, unreadable or malformed."""


class CheckpointError(DataError):
    """A checkpoint could not be read or does not match the model."""


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite."""
