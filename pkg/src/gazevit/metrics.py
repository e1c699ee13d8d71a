"""Gaze-only baseline, attention/fixation alignment and rank statistics."""

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_same_shape
from .exceptions import InvalidParameterError
from .gaze import FixationMap
from .vit import reduce_attention

EXACT_LIMIT = 12
IOU_THRESHOLD = 0.4


class EmptyForegroundWarning(UserWarning):
    """Both binarized maps were empty, so IoU was set to 0."""


class DummyTieWarning(UserWarning):
    """Left and right halves carried equal mass; the tie-break side was returned."""


def _grid(m):
    return np.asarray(m.grid if isinstance(m, FixationMap) else m, dtype=np.float64)


def half_sums(fixation_map):
    """Mass in the left and right halves; an odd middle column counts for neither."""
    grid = _grid(fixation_map)
    if grid.ndim != 2:
        raise InvalidParameterError(f"fixation map must be 2-D, got shape {grid.shape}")
    w = grid.shape[1]
    half = w // 2
    return float(grid[:, :half].sum()), float(grid[:, w - half:].sum())


class DummyDecision(NamedTuple):
    label: str
    tie: bool


def dummy_classify(fixation_map, tie_break="left", return_tie=False):
    """Turn direction from the half of the fixation map with more mass."""
    if tie_break not in ("left", "right"):
        raise InvalidParameterError(f"tie_break must be left or right, got {tie_break!r}")
    left, right = half_sums(fixation_map)
    tie = left == right
    label = tie_break if tie else ("left" if left > right else "right")
    return DummyDecision(label, tie) if return_tie else label


class DummyGazeClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`dummy_classify`; ``X`` is a stack of fixation maps."""

    def __init__(self, tie_break="left"):
        self.tie_break = tie_break

    def fit(self, X, y=None):
        self.classes_ = np.array(["left", "right"])
        return self

    def predict(self, X):
        decisions = [dummy_classify(m, self.tie_break, return_tie=True) for m in X]
        self.n_ties_ = sum(d.tie for d in decisions)
        if self.n_ties_:
            warnings.warn(f"{self.n_ties_} maps tied; predicted {self.tie_break}", DummyTieWarning, stacklevel=2)
        return np.array([d.label for d in decisions])


def _as_reduced(attention, n_patches):
    attention = np.asarray(attention, dtype=np.float64)
    if attention.shape[-1] == n_patches + 1 and attention.shape[-2] == n_patches + 1:
        attention = np.asarray(reduce_attention(attention))
    if attention.ndim < 3 or attention.shape[-1] != n_patches:
        raise InvalidParameterError(
            f"attention of shape {attention.shape} does not match a fixation vector of length {n_patches}"
        )
    return attention


def layer_similarity(attention, f_red):
    """Per-layer mean over heads of ``a_(l,a) . f_red``.

    ``attention`` is either raw weights ``(L, A, N+1, N+1)`` or reduced
    vectors ``(L, A, N)``.
    """
    f_red = np.asarray(f_red, dtype=np.float64)
    reduced = _as_reduced(attention, f_red.shape[-1])
    return (reduced @ f_red).mean(axis=-1)


def iou_alignment(attn_map, fix_map, threshold=IOU_THRESHOLD):
    """IoU of two [0, 1] heat maps binarized at ``threshold``; 0 with a warning when both are empty."""
    a = np.asarray(attn_map, dtype=np.float64)
    b = np.asarray(fix_map, dtype=np.float64)
    check_same_shape(a, b, ("attention map", "fixation map"))
    for name, m in (("attention map", a), ("fixation map", b)):
        if m.size and (m.min() < 0.0 or m.max() > 1.0):
            raise InvalidParameterError(f"{name} must be min-max normalized to [0, 1]")
    fa, fb = a >= threshold, b >= threshold
    union = np.count_nonzero(fa | fb)
    if union == 0:
        warnings.warn("both maps have empty foreground", EmptyForegroundWarning, stacklevel=2)
        return 0.0
    return np.count_nonzero(fa & fb) / union


def total_statistics(attention, fixation_map, edge):
    """Raw sums of reduced attention, fixation mass and edge pixels for one sample.

    ``attention`` is raw ``(L, A, N+1, N+1)`` weights or reduced ``(L, A, N)``.
    """
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim == 4:
        attention = np.asarray(reduce_attention(attention))
    return float(attention.sum()), float(_grid(fixation_map).sum()), float(np.asarray(edge, dtype=np.float64).sum())


def zscore(values):
    """Standardize with the population std; a constant collection maps to zeros."""
    values = np.asarray(values, dtype=np.float64)
    sd = values.std(axis=0)
    centred = values - values.mean(axis=0)
    return np.divide(centred, sd, out=np.zeros_like(centred), where=sd > 0)


@dataclass
class AlignmentReport:
    similarity: np.ndarray  # per layer
    iou: float
    totals: np.ndarray = field(default=None)  # (n, 3) z-scored activation, fixation, edge

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise InvalidParameterError(f"iou must lie in [0, 1], got {self.iou}")


class MannWhitneyResult(NamedTuple):
    statistic: float
    pvalue: float


def _u_statistic(ranks, n_a):
    return float(ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0)


def mann_whitney_u(sample_a, sample_b, alternative="two-sided"):
    """Rank-sum U of ``sample_a`` with midranks for ties.

    The p-value is exact when ``n_a + n_b <= 12``, by enumerating every way
    of assigning the pooled midranks to the first sample; otherwise it uses
    the normal approximation with tie-corrected variance and continuity
    correction. If every value is equal, ``p = 1``.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise InvalidParameterError("both samples must be nonempty")
    if alternative not in ("two-sided", "less", "greater"):
        raise InvalidParameterError(f"unknown alternative {alternative!r}")
    n_a, n_b = a.size, b.size
    n = n_a + n_b
    ranks = stats.rankdata(np.concatenate([a, b]))
    u = _u_statistic(ranks, n_a)
    if np.all(ranks == ranks[0]):
        return MannWhitneyResult(u, 1.0)

    if n <= EXACT_LIMIT:
        combos = np.array(list(itertools.combinations(range(n), n_a)))
        null = ranks[combos].sum(axis=1) - n_a * (n_a + 1) / 2.0
        tol = 1e-9
        p_less = np.count_nonzero(null <= u + tol) / null.size
        p_greater = np.count_nonzero(null >= u - tol) / null.size
    else:
        mu = n_a * n_b / 2.0
        _, counts = np.unique(ranks, return_counts=True)
        tie_term = (counts ** 3 - counts).sum() / (n * (n - 1))
        sd = math.sqrt(n_a * n_b / 12.0 * ((n + 1) - tie_term))
        p_less = float(stats.norm.cdf((u - mu + 0.5) / sd))
        p_greater = float(stats.norm.sf((u - mu - 0.5) / sd))
    if alternative == "less":
        p = p_less
    elif alternative == "greater":
        p = p_greater
    else:
        p = 2.0 * min(p_less, p_greater)
    return MannWhitneyResult(u, float(min(1.0, p)))


def auc_score(scores, labels):
    """ROC AUC as the rank-sum statistic with midranks; ``None`` for single-class labels."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    n_pos = np.count_nonzero(labels)
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


class ClassificationMetrics(NamedTuple):
    accuracy: float
    auc: object  # float or None
    f1: float


def classification_metrics(scores, labels, threshold=0.5):
    """Accuracy, AUC and F1 for positive-class scores; ``labels`` is 1 for the positive class.

    A sample is predicted positive when its score is at least ``threshold``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise InvalidParameterError("scores and labels must have equal length")
    if scores.size == 0:
        raise InvalidParameterError("cannot score an empty set")
    if np.any((scores < 0) | (scores > 1)) or not np.all(np.isfinite(scores)):
        raise InvalidParameterError("scores must lie in [0, 1]")
    pred = scores >= threshold
    accuracy = float(np.mean(pred == labels))
    tp = np.count_nonzero(pred & labels)
    denom = np.count_nonzero(pred) + np.count_nonzero(labels)
    f1 = 2.0 * tp / denom if denom else 0.0
    return ClassificationMetrics(accuracy, auc_score(scores, labels), float(f1))
