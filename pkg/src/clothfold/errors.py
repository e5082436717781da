"""Exception types shared across the package."""


class ClothFoldError(Exception):
    """Base class for all package errors."""


class InvalidCloth(ClothFoldError):
    """Cloth construction parameters are unusable."""


class ShapeMismatch(ClothFoldError):
    """Two objects that must share dimensions do not."""


class InvalidTier(ClothFoldError):
    """Requested task tier is outside the supported range."""


class PerturbTooLarge(ClothFoldError):
    """No-action jitter cannot be kept under the movement threshold."""


class FormatError(ClothFoldError):
    """Persisted file is malformed or carries the wrong version."""


class EmptyDataset(ClothFoldError):
    """An operation that needs data received none."""


class EmptyBank(ClothFoldError):
    """Decoding requested against an empty state bank."""


class UnsupportedVariant(ClothFoldError):
    """Operation not defined for this encoder/scorer variant."""


class InsufficientPairs(ClothFoldError):
    """Dataset lacks the action/no-action pairs the operation needs."""


class EpsilonTooLarge(ClothFoldError):
    """Clustering radius merged the endpoints of an action pair."""


class NoPath(ClothFoldError):
    """Goal node unreachable from the start node."""


class EmptyFlow(ClothFoldError):
    """Flow comparison over a field with no valid pixels."""


class InvalidPick(ClothFoldError):
    """Pick pixel is not a valid cell of the flow field."""


class ArtifactMissing(ClothFoldError):
    """A required artifact file does not exist."""
