"""Small input-validation helpers in the spirit of ``sklearn.utils.validation``."""

import numbers

import numpy as np

from .exceptions import InvalidParameterError


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise InvalidParameterError(f"{name} must be a positive finite number, got {value!r}")
    return value


def check_fraction(value, name, *, closed=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise InvalidParameterError(f"{name} must be a real number, got {value!r}")
    ok = 0.0 <= value <= 1.0 if closed else 0.0 < value < 1.0
    if not ok:
        raise InvalidParameterError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


def check_frame_dims(frame_dims):
    try:
        h, w = (int(d) for d in frame_dims)
    except (TypeError, ValueError):
        raise InvalidParameterError(f"frame_dims must be a pair of ints, got {frame_dims!r}") from None
    if h <= 0 or w <= 0:
        raise InvalidParameterError(f"frame_dims must be positive, got {frame_dims!r}")
    return h, w


def check_divisible(h, w, patch_size):
    if patch_size <= 0 or h % patch_size or w % patch_size:
        raise InvalidParameterError(
            f"frame dims ({h}, {w}) are not divisible by patch size {patch_size}"
        )


def check_map(arr, name="map", ndim=2):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != ndim:
        raise InvalidParameterError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} contains non-finite values")
    return arr


def check_frame(frame):
    """Return ``frame`` as an H x W x C array; grayscale input gets a channel axis."""
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    if frame.ndim != 3:
        raise InvalidParameterError(f"frame must be H x W x C, got shape {frame.shape}")
    return frame


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise InvalidParameterError(
            f"{names[0]} shape {a.shape} does not match {names[1]} shape {b.shape}"
        )
