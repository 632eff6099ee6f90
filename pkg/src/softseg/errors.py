"""Exception types raised across the package."""


class SoftsegError(Exception):
    """Base class for all structured softseg failures."""


class ShapeError(SoftsegError):
    """Tensor dimensions incompatible with an operation."""


class NonFiniteGradientError(SoftsegError):
    """An optimizer step was rejected because a gradient contained NaN/Inf."""

    def __init__(self, param_name: str):
        self.param_name = param_name
        super().__init__(f"non-finite gradient for parameter '{param_name}'; step rejected")


class PaletteError(SoftsegError):
    """Malformed palette file or invalid palette contents."""


class PaletteSizeMismatchError(SoftsegError):
    """Palette size does not match the K the model was trained with."""

    def __init__(self, got: int, expected: int):
        self.got = got
        self.expected = expected
        super().__init__(f"palette has {got} colors but the model was trained with K={expected}")


class ImageReadError(SoftsegError):
    """File could not be decoded as an image."""


class DatasetError(SoftsegError):
    """Training dataset directory unusable."""


class WeightsFormatError(SoftsegError):
    """Weight container corrupt or inconsistent with the declared architecture."""


class TrainingDivergedError(SoftsegError):
    """Loss became non-finite during training; last good checkpoint was kept."""
