"""Typed errors raised by the package. Every validation failure maps to one of
these so callers (CLI, HTTP service) can surface machine-readable codes."""


class PointfitError(Exception):
    """Base class. `code` is the machine-readable identifier."""

    code = "error"


class ShapeMismatchError(PointfitError):
    code = "shape_mismatch"


class DimensionError(PointfitError):
    """Image dimensions incompatible with the codec downsample factor."""

    code = "bad_dimensions"


class CodecNotTrainedError(PointfitError):
    code = "codec_not_trained"


class TimestepRangeError(PointfitError):
    code = "timestep_out_of_range"


class NumericInstabilityError(PointfitError):
    """Non-finite values during sampling or training; message names the step."""

    code = "numeric_instability"


class TooManyPointsError(PointfitError):
    code = "too_many_points"


class OutOfBoundsPointError(PointfitError):
    code = "out_of_bounds_point"


class EmptyMaskError(PointfitError):
    code = "empty_mask"


class MaskContainmentError(PointfitError):
    """Drag start point outside the clothes mask."""

    code = "start_outside_mask"


class GarmentCountError(PointfitError):
    code = "bad_garment_count"


class ArticulationError(PointfitError):
    """Figure joint angles would push limbs out of frame."""

    code = "articulation_limit"


class SupportDomainError(PointfitError):
    """Queried point lies outside the garment support."""

    code = "outside_garment_support"


class CheckpointError(PointfitError):
    code = "bad_checkpoint"


class ConfigError(PointfitError):
    code = "bad_config"


class RequestError(PointfitError):
    """Malformed service request; `code` set per instance."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
