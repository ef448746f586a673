"""Exception types shared across the package."""


class AgeditError(Exception):
    """Base class for all package errors."""


class ConfigError(AgeditError):
    """Invalid configuration value (bad T, unknown family, zero batch size, ...)."""


class ShapeError(AgeditError):
    """Tensor shapes incompatible with the requested operation."""


class RangeError(AgeditError):
    """Scalar argument outside its valid range (timestep, age, ...)."""


class SingularityError(AgeditError):
    """Division by a vanishing schedule coefficient."""


class UnknownTokenError(AgeditError):
    """Prompt contains a token outside the model vocabulary / token registry."""


class ManifestError(AgeditError):
    """Dataset manifest missing, malformed, or referencing missing files."""


class DisjointnessError(AgeditError):
    """Subject identities overlap where disjointness is required."""


class DivergenceError(AgeditError):
    """Training produced a non-finite loss."""


class InsufficientBatchError(AgeditError):
    """Contrastive loss needs at least two pairs to form negatives."""


class InsufficientPairsError(AgeditError):
    """Not enough labeled images to form genuine and impostor pairs."""


class InsufficientDataError(AgeditError):
    """Score set too small for the requested metric."""
