"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array has the wrong rank, an incompatible axis, or a size that
    violates an operation's requirements. Messages name the offending axis."""


class ConfigError(ValueError):
    """A user-supplied configuration value is invalid."""


class ContractViolation(RuntimeError):
    """An API was used outside its stated contract (e.g. normalizing an
    already normalized position field)."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its placement
    constraints within the retry budget."""


class EmptyMaskError(ValueError):
    """A boundary-based metric was requested for an empty mask, where the
    surface is undefined. Reporting layers record the metric as missing."""
