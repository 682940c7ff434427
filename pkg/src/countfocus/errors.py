"""Exception types shared across the toolkit."""


class CountFocusError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(CountFocusError):
    """Two parallel structures disagree in length or array shape."""


class NoNeighbors(CountFocusError):
    """Neighbor query on a point set with fewer than two points."""


class MissingBoxes(CountFocusError):
    """Operation requires box annotations but the point set has none."""


class EmptyCanvas(CountFocusError):
    """Rasterization target has zero width or height."""


class NoData(CountFocusError):
    """Operation received an empty collection where at least one item is required."""


class NotScalar(CountFocusError):
    """Backward pass started from a non-scalar tensor."""


class InvalidConfig(CountFocusError):
    """Network configuration violates a structural constraint."""


class UndefinedPeak(CountFocusError):
    """PSNR/SSIM normalization is undefined for an all-zero reference map."""
