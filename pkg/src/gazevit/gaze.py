"""Fixation maps, patch reduction, peripheral masks and edge maps."""

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import (
    check_divisible,
    check_frame,
    check_frame_dims,
    check_map,
)
from .exceptions import InvalidParameterError, MissingDataError

REFERENCE_SIZE = 224
DEFAULT_SIGMA_AT_REFERENCE = 16.0
DEFAULT_KERNEL_AT_REFERENCE = 30
NORMALIZATIONS = ("unit-sum", "unit-max", "raw")


class EmptyInputWarning(UserWarning):
    """An operation received no usable signal and returned its neutral output."""


@dataclass
class GazeTrace:
    """Time-ordered gaze samples in frame pixel coordinates."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).ravel()
        self.x = np.asarray(self.x, dtype=np.float64).ravel()
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.valid is None:
            self.valid = np.ones(self.t.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool).ravel()
        n = self.t.size
        if not (self.x.size == self.y.size == self.valid.size == n):
            raise InvalidParameterError("gaze columns t, x, y, valid must have equal length")
        if n > 1 and np.any(np.diff(self.t) < 0):
            raise InvalidParameterError("gaze timestamps must be nondecreasing")
        # non-finite coordinates can never be accumulated
        self.valid = self.valid & np.isfinite(self.x) & np.isfinite(self.y)

    def __len__(self):
        return self.t.size

    def rescaled(self, source_dims, frame_dims):
        """Map coordinates from a tracker resolution ``(H_src, W_src)`` onto the frame."""
        sh, sw = (float(d) for d in source_dims)
        fh, fw = check_frame_dims(frame_dims)
        return GazeTrace(self.t, self.x * (fw / sw), self.y * (fh / sh), self.valid)

    def shifted(self, dx, dy):
        return GazeTrace(self.t, self.x + dx, self.y + dy, self.valid)

    def select(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return GazeTrace(self.t[mask], self.x[mask], self.y[mask], self.valid[mask])


@dataclass
class FixationMap:
    grid: np.ndarray
    window: tuple
    sigma: float
    n_samples: int = 0

    @property
    def empty(self):
        return self.n_samples == 0 or not np.any(self.grid > 0)

    @property
    def shape(self):
        return self.grid.shape


def default_sigma(frame_dims):
    h, w = check_frame_dims(frame_dims)
    return DEFAULT_SIGMA_AT_REFERENCE * min(h, w) / REFERENCE_SIZE


def default_kernel(frame_dims):
    h, w = check_frame_dims(frame_dims)
    return max(1, int(round(DEFAULT_KERNEL_AT_REFERENCE * min(h, w) / REFERENCE_SIZE)))


def _duration_weights(t, t_end):
    """Time each sample holds until the next one, clipped at the window end."""
    if t.size == 0:
        return t
    nxt = np.empty_like(t)
    nxt[:-1] = t[1:]
    steps = np.diff(t)
    steps = steps[steps > 0]
    nxt[-1] = t[-1] + (np.median(steps) if steps.size else 0.0)
    return np.clip(np.minimum(nxt, t_end) - t, 0.0, None)


def build_fixation_map(trace, window, frame_dims, sigma=None, duration_weighting=False):
    """Accumulate one isotropic Gaussian per valid gaze sample inside ``window``.

    Every Gaussian has unit peak and is truncated at the frame border; with
    ``duration_weighting`` each term is scaled by the time the sample holds.
    A window without valid samples yields an all-zero map and an
    ``EmptyInputWarning``.
    """
    h, w = check_frame_dims(frame_dims)
    if sigma is None:
        sigma = default_sigma((h, w))
    if not np.isfinite(sigma) or sigma <= 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma!r}")
    t_start, t_end = (float(v) for v in window)

    in_window = (trace.t >= t_start) & (trace.t <= t_end)
    weights = (
        _duration_weights(trace.t, t_end) if duration_weighting else np.ones(trace.t.size)
    )
    keep = in_window & trace.valid
    xs, ys, ws = trace.x[keep], trace.y[keep], weights[keep]

    if xs.size == 0:
        warnings.warn(
            f"no valid gaze samples in window ({t_start}, {t_end})", EmptyInputWarning, stacklevel=2
        )
        return FixationMap(np.zeros((h, w)), (t_start, t_end), float(sigma), 0)

    # the 2-D kernel is separable, so the sum over samples is Gy^T diag(w) Gx
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    gy = np.exp(-((rows[None, :] - ys[:, None]) ** 2) / (2.0 * sigma**2))
    gx = np.exp(-((cols[None, :] - xs[:, None]) ** 2) / (2.0 * sigma**2))
    grid = (gy * ws[:, None]).T @ gx
    return FixationMap(grid, (t_start, t_end), float(sigma), int(xs.size))


def _as_grid(fixation_map):
    if isinstance(fixation_map, FixationMap):
        return fixation_map.grid
    return check_map(fixation_map, "fixation map")


def patch_means(grid, patch_size):
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    check_divisible(h, w, patch_size)
    p = patch_size
    return grid.reshape(h // p, p, w // p, p).mean(axis=(1, 3)).ravel()


def normalize_vector(values, normalization="unit-sum"):
    if normalization not in NORMALIZATIONS:
        raise InvalidParameterError(
            f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}"
        )
    values = np.asarray(values, dtype=np.float64)
    if normalization == "unit-sum":
        total = values.sum()
        return values / total if total > 0 else values.copy()
    if normalization == "unit-max":
        peak = values.max() if values.size else 0.0
        return values / peak if peak > 0 else values.copy()
    return values.copy()


def reduce_fixation_map(fixation_map, patch_size, normalization="unit-sum"):
    """Area-mean of the map over each patch, row-major, then normalized."""
    grid = _as_grid(fixation_map)
    return normalize_vector(patch_means(grid, patch_size), normalization)


def binarize(grid, fraction=0.05):
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max() if grid.size else 0.0
    if peak <= 0:
        return np.zeros(grid.shape, dtype=bool)
    return grid > fraction * peak


def dilate(mask, kernel):
    """Binary dilation with a ``kernel[0] x kernel[1]`` box.

    Output pixel ``r`` covers inputs ``r - k//2 .. r + k - 1 - k//2``; for
    odd ``k`` the box is centred.
    """
    kh, kw = kernel
    return ndimage.maximum_filter(
        np.asarray(mask, dtype=np.uint8), size=(kh, kw), mode="constant", cval=0
    ).astype(bool)


@dataclass
class MaskSpec:
    kind: str = "peripheral"
    dilation_kernel: tuple = None
    threshold: float = 0.05
    seed: int = None

    def __post_init__(self):
        if self.kind not in ("peripheral", "random-control"):
            raise InvalidParameterError(f"unknown mask kind {self.kind!r}")
        if self.dilation_kernel is not None:
            if isinstance(self.dilation_kernel, int):
                self.dilation_kernel = (self.dilation_kernel, self.dilation_kernel)
            kh, kw = (int(k) for k in self.dilation_kernel)
            if kh < 1 or kw < 1 or kh != kw:
                raise InvalidParameterError(
                    f"dilation kernel must be a square of side >= 1, got {self.dilation_kernel!r}"
                )
            self.dilation_kernel = (kh, kw)


def make_peripheral_mask(fixation_map, spec=None):
    """Dilate the thresholded fixation region into a binary periphery mask."""
    spec = spec or MaskSpec()
    grid = _as_grid(fixation_map)
    kernel = spec.dilation_kernel or (default_kernel(grid.shape),) * 2
    if not np.any(grid > 0):
        warnings.warn("all-zero fixation map; peripheral mask is empty", EmptyInputWarning, stacklevel=2)
        return np.zeros(grid.shape, dtype=bool)
    return dilate(binarize(grid, spec.threshold), kernel)


def transform_mask(mask, angle_deg, offset):
    """Rotate ``mask`` about its foreground centroid, then shift by integer ``offset``.

    Nearest-neighbour inverse mapping; pixels mapped from outside the frame
    are background.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    dy, dx = (int(o) for o in offset)
    if not mask.any():
        return mask.copy()
    fy, fx = np.nonzero(mask)
    cy, cx = fy.mean(), fx.mean()
    theta = np.deg2rad(angle_deg % 360.0)
    cos, sin = np.cos(theta), np.sin(theta)
    if angle_deg % 360.0 == 0:
        cos, sin = 1.0, 0.0

    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    ry, rx = rr - dy - cy, cc - dx - cx
    # inverse rotation of the destination lattice
    sy = cos * ry - sin * rx + cy
    sx = sin * ry + cos * rx + cx
    iy = np.rint(sy).astype(np.int64)
    ix = np.rint(sx).astype(np.int64)
    inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.zeros_like(mask)
    out[inside] = mask[iy[inside], ix[inside]]
    return out


def make_random_control_mask(mask, seed):
    """Randomly rotate and relocate a peripheral mask, deterministic in ``seed``.

    The angle is uniform in [0, 360) and the mask centroid lands on a pixel
    drawn uniformly over the frame.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise InvalidParameterError(f"mask must be 2-D, got shape {mask.shape}")
    rng = np.random.default_rng(seed)
    h, w = mask.shape
    angle = rng.uniform(0.0, 360.0)
    ty, tx = rng.integers(0, h), rng.integers(0, w)
    if not mask.any():
        return mask.copy()
    fy, fx = np.nonzero(mask)
    offset = (ty - int(np.rint(fy.mean())), tx - int(np.rint(fx.mean())))
    return transform_mask(mask, angle, offset)


def apply_mask(frame, mask):
    """Zero every pixel (all channels) where ``mask`` is 0."""
    arr = np.asarray(frame)
    mask = np.asarray(mask, dtype=bool)
    if arr.shape[:2] != mask.shape:
        raise InvalidParameterError(f"mask shape {mask.shape} does not match frame {arr.shape[:2]}")
    keep = mask if arr.ndim == 2 else mask[:, :, None]
    return np.where(keep, arr, np.zeros((), dtype=arr.dtype))


def edge_map(frame, low=25, high=50, l2_gradient=True):
    """Grayscale, 3x3 Gaussian blur, then Canny; returns a 0/1 ``uint8`` map.

    Gradient magnitude is Euclidean by default; ``l2_gradient=False`` gives
    OpenCV's cheaper L1 magnitude, which marks noticeably more pixels.
    """
    frame = check_frame(frame)
    img = frame
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    gray = img[:, :, 0] if img.shape[2] == 1 else cv2.cvtColor(np.ascontiguousarray(img[:, :, :3]), cv2.COLOR_RGB2GRAY)
    blurred = cv2.GaussianBlur(gray, (3, 3), 0)
    return (cv2.Canny(blurred, low, high, L2gradient=l2_gradient) > 0).astype(np.uint8)


def minmax_normalize(grid):
    """Scale to [0, 1]; an all-constant map becomes all zeros."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 0:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


# --- persistence -----------------------------------------------------------

def read_gaze(path):
    """Load a gaze trace from ``.csv``/``.tsv`` (header t,x,y,valid) or ``.npz``."""
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"gaze file not found: {path}")
    if path.suffix == ".npz":
        with np.load(path) as data:
            return GazeTrace(data["t"], data["x"], data["y"], data["valid"] if "valid" in data else None)
    delimiter = "\t" if path.suffix == ".tsv" else ","
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        rows = list(reader)
    if not rows:
        return GazeTrace([], [], [], [])
    missing = {"t", "x", "y"} - set(rows[0])
    if missing:
        raise MissingDataError(f"gaze file {path} lacks columns {sorted(missing)}")
    valid = [r.get("valid", "1").strip().lower() in ("1", "true", "yes") for r in rows]
    return GazeTrace(
        [float(r["t"]) for r in rows],
        [float(r["x"]) for r in rows],
        [float(r["y"]) for r in rows],
        valid,
    )


def write_gaze(path, trace):
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, t=trace.t, x=trace.x, y=trace.y, valid=trace.valid)
        return path
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t" if path.suffix == ".tsv" else ",")
        writer.writerow(["t", "x", "y", "valid"])
        for row in zip(trace.t, trace.x, trace.y, trace.valid):
            writer.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), int(row[3])])
    return path


def save_fixation_map(path, fixation_map):
    np.save(path, _as_grid(fixation_map))
    return Path(path)


def load_fixation_map(path):
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"fixation map not found: {path}")
    return np.load(path)


def save_mask(path, mask):
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path)
    return Path(path)


def load_mask(path):
    return np.asarray(Image.open(path).convert("1"), dtype=bool)


class FixationReducer(TransformerMixin, BaseEstimator):
    """Turn a sequence of fixation maps into patch-grid vectors.

    Stateless; ``fit`` only validates parameters so the reducer can sit in
    a ``Pipeline``.
    """

    def __init__(self, patch_size=8, normalization="unit-sum"):
        self.patch_size = patch_size
        self.normalization = normalization

    def fit(self, X, y=None):
        if self.normalization not in NORMALIZATIONS:
            raise InvalidParameterError(f"unknown normalization {self.normalization!r}")
        if int(self.patch_size) < 1:
            raise InvalidParameterError("patch_size must be >= 1")
        return self

    def transform(self, X):
        maps = [_as_grid(m) for m in X]
        return np.stack(
            [reduce_fixation_map(m, self.patch_size, self.normalization) for m in maps]
        )

