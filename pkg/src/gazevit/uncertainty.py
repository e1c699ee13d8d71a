"""Scene uncertainty from fog opacity metadata or local image contrast."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frame
from .exceptions import DegenerateSplitError, InvalidParameterError, MissingDataError

EPS = 1e-6
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
DIRECTIONS = ("higher-is-uncertain", "lower-is-uncertain")


@dataclass(frozen=True)
class UncertaintyLabel:
    value: float
    source: str
    split: str
    threshold: float

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise InvalidParameterError(f"uncertainty value must be finite, got {self.value}")
        if self.source not in ("opacity", "contrast"):
            raise InvalidParameterError(f"unknown uncertainty source {self.source!r}")
        if self.split not in ("high", "low"):
            raise InvalidParameterError(f"unknown split tag {self.split!r}")


def luminance(frame):
    frame = check_frame(frame).astype(np.float64)
    if frame.shape[-1] == 1:
        return frame[..., 0]
    return frame @ LUMA_WEIGHTS


def local_contrast(frame, size=5):
    """Per-pixel Michelson contrast over a ``size`` x ``size`` neighbourhood.

    Windows are clipped at the border; replicating edge pixels gives the
    same extrema as the clipped window, so ``mode="nearest"`` is exact here.
    """
    lum = luminance(frame)
    hi = ndimage.maximum_filter(lum, size=size, mode="nearest")
    lo = ndimage.minimum_filter(lum, size=size, mode="nearest")
    return (hi - lo) / (hi + lo + EPS)


def contrast_uncertainty(frame, size=5):
    """Mean local contrast of a frame; low values mean an uncertain scene."""
    return float(local_contrast(frame, size).mean())


def opacity_uncertainty(metadata, key="opacity"):
    """Fog opacity straight from trial metadata; high values mean an uncertain scene."""
    try:
        value = metadata[key]
    except (KeyError, TypeError):
        raise MissingDataError(f"trial metadata has no {key!r} field") from None
    if value is None:
        raise MissingDataError(f"trial metadata has no {key!r} value")
    return float(value)


@dataclass
class UncertaintySplit:
    tags: list
    threshold: float
    rule: str
    direction: str

    @property
    def counts(self):
        return {"high": self.tags.count("high"), "low": self.tags.count("low")}

    def labels(self, values, source):
        return [UncertaintyLabel(float(v), source, t, self.threshold) for v, t in zip(values, self.tags)]


def split_by_uncertainty(values, rule="median", direction="higher-is-uncertain", threshold=None):
    """Tag each value ``high`` or ``low``.

    Values strictly beyond the threshold in the uncertain direction are
    ``high``; the threshold is the median under ``rule="median"`` and the
    given ``threshold`` under ``rule="fixed"``.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise InvalidParameterError("cannot split an empty list of values")
    if not np.all(np.isfinite(values)):
        raise InvalidParameterError("uncertainty values must be finite")
    if direction not in DIRECTIONS:
        raise InvalidParameterError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if rule == "median":
        if np.all(values == values[0]):
            raise DegenerateSplitError("all uncertainty values are identical; median split is undefined")
        theta = float(np.median(values))
    elif rule == "fixed":
        if threshold is None:
            raise InvalidParameterError("fixed rule needs a threshold")
        theta = float(threshold)
    else:
        raise InvalidParameterError(f"unknown split rule {rule!r}")
    high = values > theta if direction == "higher-is-uncertain" else values < theta
    tags = ["high" if h else "low" for h in high]
    return UncertaintySplit(tags, theta, rule, direction)


class ContrastUncertainty(TransformerMixin, BaseEstimator):
    """Maps frames to mean local contrast and learns the median split on fit."""

    def __init__(self, size=5, rule="median", threshold=None):
        self.size = size
        self.rule = rule
        self.threshold = threshold

    def fit(self, X, y=None):
        values = self.transform(X)
        self.split_ = split_by_uncertainty(values, self.rule, "lower-is-uncertain", self.threshold)
        self.threshold_ = self.split_.threshold
        return self

    def transform(self, X):
        return np.array([contrast_uncertainty(f, self.size) for f in X])

    def predict(self, X):
        """``True`` where the frame is high-uncertainty under the fitted threshold."""
        check_is_fitted(self, "threshold_")
        return self.transform(X) < self.threshold_
