"""Desk-scale synthetic turn dataset with known ground truth.

Each event gets a 32x32 frame holding a bright ``plus`` target glyph in the
half that encodes the label (left half = left turn) and a ``ring`` distractor
of equal ink in the other half, so neither half is brighter on average.
Glyphs sit near the centre of a patch cell (one pixel of jitter). A gaze
trace over the premotor window rests on the target with probability
``rho`` and on the opposite-half distractor otherwise, so a gaze-only
left/right rule scores about ``rho``. Half the events are rendered at low
glyph contrast (the high-uncertainty group). A session steering trace puts
one pulse at each event time, signed by its label.
"""

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .gaze import GazeTrace, write_gaze
from .exceptions import InvalidParameterError

LABELS = ("left", "right")

PLUS = np.array(
    [
        [0, 0, 1, 0, 0],
        [0, 0, 1, 0, 0],
        [1, 1, 1, 1, 1],
        [0, 0, 1, 0, 0],
        [0, 0, 1, 0, 0],
    ],
    dtype=np.float64,
)
RING = np.array(
    [
        [0, 0, 0, 0, 0],
        [0, 1, 1, 1, 0],
        [0, 1, 0, 1, 0],
        [0, 1, 1, 1, 0],
        [0, 0, 0, 0, 0],
    ],
    dtype=np.float64,
)
# both glyphs carry the same ink so brightness alone cannot tell them apart
RING = RING * (PLUS.sum() / RING.sum())


@dataclass
class SynthSpec:
    n_samples: int = 2000
    image_size: int = 32
    left_fraction: float = 0.5
    rho: float = 0.9
    high_uncertainty_fraction: float = 0.5
    glyph_amplitude: float = 0.5
    texture_std: float = 0.06
    low_contrast_factor: float = 0.3
    sensor_noise_std: float = 0.03
    premotor_seconds: float = 3.0
    patch_size: int = 8
    gaze_rate_hz: float = 30.0
    gaze_jitter_px: float = 1.0
    invalid_gaze_fraction: float = 0.05
    event_spacing_seconds: float = 5.0
    steering_rate_hz: float = 50.0
    steering_peak_deg: float = 20.0
    exact_counts: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidParameterError("n_samples must be >= 1")
        if self.image_size < 16:
            raise InvalidParameterError("image_size must be >= 16")
        if self.patch_size < 6 or self.image_size % (2 * self.patch_size):
            raise InvalidParameterError("image_size must split into an even number of patch cells of size >= 6")
        for name in ("left_fraction", "rho", "high_uncertainty_fraction", "invalid_gaze_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1], got {value}")


@dataclass
class SyntheticData:
    frames: np.ndarray  # (n, H, W, 3) uint8
    labels: np.ndarray  # strings
    gaze: list  # GazeTrace per event, pixel coordinates
    windows: np.ndarray  # (n, 2) premotor interval
    event_times: np.ndarray
    high_uncertainty: np.ndarray  # bool
    gaze_on_target: np.ndarray  # bool
    target_centers: np.ndarray  # (n, 2) row, col
    steering_t: np.ndarray
    steering_angle: np.ndarray
    spec: SynthSpec

    def __len__(self):
        return len(self.labels)


def _stamp(canvas, glyph, center, amplitude):
    r, c = center
    k = glyph.shape[0] // 2
    canvas[r - k:r + k + 1, c - k:c + k + 1] += amplitude * glyph


def _draw_labels(spec, rng):
    n = spec.n_samples
    if spec.exact_counts:
        n_left = int(round(spec.left_fraction * n))
        is_left = np.zeros(n, dtype=bool)
        is_left[:n_left] = True
        rng.shuffle(is_left)
    else:
        is_left = rng.random(n) < spec.left_fraction
    return is_left


def generate(spec, seed=0):
    """Build the dataset in memory."""
    rng = np.random.default_rng(seed)
    n, size, p = spec.n_samples, spec.image_size, spec.patch_size
    cells = size // p

    is_left = _draw_labels(spec, rng)
    n_high = int(round(spec.high_uncertainty_fraction * n))
    high = np.zeros(n, dtype=bool)
    high[:n_high] = True
    rng.shuffle(high)
    on_target = rng.random(n) < spec.rho

    frames = np.empty((n, size, size, 3), dtype=np.uint8)
    centers = np.empty((n, 2), dtype=np.int64)
    gaze, windows, times = [], np.empty((n, 2)), np.empty(n)
    n_gaze = int(round(spec.premotor_seconds * spec.gaze_rate_hz))
    jitter = spec.gaze_jitter_px
    left_cells, right_cells = np.arange(cells // 2), np.arange(cells // 2, cells)

    def place(col_cells):
        r = p * rng.integers(cells) + p // 2 + rng.integers(-1, 1)
        c = p * rng.choice(col_cells) + p // 2 + rng.integers(-1, 1)
        return int(r), int(c)

    for i in range(n):
        fog = spec.low_contrast_factor if high[i] else 1.0
        own, other = (left_cells, right_cells) if is_left[i] else (right_cells, left_cells)
        target, decoy = place(own), place(other)
        scene = spec.texture_std * rng.standard_normal((size, size))
        _stamp(scene, PLUS, target, spec.glyph_amplitude)
        _stamp(scene, RING, decoy, spec.glyph_amplitude)
        tint = 1.0 + 0.1 * rng.uniform(-1, 1, size=3)
        base = 0.5 + 0.05 * rng.uniform(-1, 1)
        # fog compresses every deviation from the base level
        rgb = base + fog * scene[:, :, None] * tint[None, None, :]
        rgb = rgb + spec.sensor_noise_std * rng.standard_normal(rgb.shape)
        frames[i] = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
        centers[i] = target

        t_event = spec.event_spacing_seconds * (i + 1)
        t0 = t_event - spec.premotor_seconds
        times[i] = t_event
        windows[i] = (t0, t_event)
        rest = target if on_target[i] else decoy
        t = t0 + np.arange(n_gaze) / spec.gaze_rate_hz
        xs = rest[1] + jitter * rng.standard_normal(n_gaze)
        ys = rest[0] + jitter * rng.standard_normal(n_gaze)
        valid = rng.random(n_gaze) >= spec.invalid_gaze_fraction
        gaze.append(GazeTrace(t, xs, ys, valid))

    steer_t, steer_a = steering_trace(times, np.where(is_left, -1.0, 1.0), spec)
    labels = np.where(is_left, "left", "right")
    return SyntheticData(frames, labels, gaze, windows, times, high, on_target, centers, steer_t, steer_a, spec)


def steering_trace(event_times, signs, spec, width=0.4):
    """Triangular steering pulses of height ``steering_peak_deg`` peaking at each event."""
    end = float(event_times[-1]) + spec.event_spacing_seconds if len(event_times) else 1.0
    t = np.arange(0.0, end, 1.0 / spec.steering_rate_hz)
    angle = np.zeros_like(t)
    for te, s in zip(event_times, signs):
        lo, hi = np.searchsorted(t, [te - width, te + width])
        near = slice(lo, hi)
        dist = np.abs(t[near] - te)
        angle[near] += np.where(dist < width, s * spec.steering_peak_deg * (1.0 - dist / width), 0.0)
    return t, angle


def write_dataset(data, root, gaze_source_dims=None):
    """Persist a generated dataset under ``root``.

    Layout: ``frames/<id>.png``, ``frames.csv`` (t, path), ``gaze.csv`` for
    the whole session, ``steering.csv``, ``trials.jsonl`` with per-event
    metadata and ``ground_truth.jsonl``. Gaze is written in
    ``gaze_source_dims`` tracker pixels (default: frame pixels).
    """
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    size = data.spec.image_size
    src_h, src_w = gaze_source_dims or (size, size)

    frame_rows, truth, trials = [], [], []
    for i in range(len(data)):
        event_id = f"e{i:05d}"
        rel = f"frames/{event_id}.png"
        Image.fromarray(data.frames[i]).save(root / rel)
        t0, t1 = data.windows[i]
        # the same image stands in for both premotor boundaries
        frame_rows += [(t0, rel), (t1, rel)]
        truth.append({
            "id": event_id,
            "label": str(data.labels[i]),
            "t_event": float(data.event_times[i]),
            "high_uncertainty": bool(data.high_uncertainty[i]),
            "gaze_on_target": bool(data.gaze_on_target[i]),
            "target_center": [int(v) for v in data.target_centers[i]],
        })
        # fog strength doubles as the trial's opacity setting
        opacity = 1.0 - data.spec.low_contrast_factor if data.high_uncertainty[i] else 0.0
        trials.append({"id": event_id, "t_event": float(data.event_times[i]), "opacity": opacity})
    frame_rows.sort(key=lambda r: r[0])

    with open(root / "frames.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "path"])
        for t, rel in frame_rows:
            writer.writerow([repr(float(t)), rel])

    all_t = np.concatenate([g.t for g in data.gaze]) if data.gaze else np.array([])
    order = np.argsort(all_t, kind="stable")
    session = GazeTrace(
        all_t[order],
        (np.concatenate([g.x for g in data.gaze]) * (src_w / size))[order],
        (np.concatenate([g.y for g in data.gaze]) * (src_h / size))[order],
        np.concatenate([g.valid for g in data.gaze])[order],
    )
    write_gaze(root / "gaze.csv", session)

    with open(root / "steering.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "angle"])
        for t, a in zip(data.steering_t, data.steering_angle):
            writer.writerow([repr(float(t)), repr(float(a))])

    for name, rows in (("ground_truth.jsonl", truth), ("trials.jsonl", trials)):
        with open(root / name, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    meta = {
        "spec": asdict(data.spec),
        "frame_dims": [size, size],
        "gaze_source_dims": [src_h, src_w],
        "premotor_seconds": data.spec.premotor_seconds,
        "input_frame_policy": "last",
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root


def generate_synthetic_dataset(spec, seed, root):
    """Generate and write a dataset; returns the root path."""
    return write_dataset(generate(spec, seed), root)
