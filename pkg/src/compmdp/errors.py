"""Exception types shared across the toolkit."""


class CompmdpError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CompmdpError):
    """Malformed or inconsistent configuration data."""


class DimensionError(CompmdpError):
    """Matrix or vector dimensions do not line up."""


class UnsupportedModelError(CompmdpError):
    """Operation applied to a model class it does not support."""


class DegenerateNoiseError(CompmdpError):
    """Noise covariance is singular along a partitioned axis."""


class MemoryBudgetError(CompmdpError):
    """Requested dense kernel exceeds the configured memory budget."""

    def __init__(self, required_bytes, budget_bytes):
        self.required_bytes = int(required_bytes)
        self.budget_bytes = int(budget_bytes)
        super().__init__(
            f"kernel needs {required_bytes / 1e9:.4f} GB, "
            f"budget is {budget_bytes / 1e9:.4f} GB; raise the budget or "
            f"pass a memmap path"
        )


class FileFormatError(CompmdpError):
    """Corrupt, truncated or wrong-version binary artifact."""
