"""Dataset-side steps: raw session logs to a training manifest.

A raw dataset root holds ``frames.csv`` (t, path), ``gaze.csv``,
``steering.csv`` or ``geo.csv``, optional ``trials.jsonl`` and a
``dataset.json`` with ``frame_dims``, ``gaze_source_dims``,
``premotor_seconds`` and ``input_frame_policy``. The steps below add
``events.jsonl``, ``fixmaps/<id>.npy`` and finally ``manifest.jsonl``.
"""

import csv
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .events import (
    assemble_dataset,
    detect_geo_turns,
    detect_steering_turns,
    read_events,
    read_geo,
    read_steering,
    select_input_frame,
    write_events,
)
from .exceptions import InvalidParameterError, MissingDataError
from .gaze import build_fixation_map, read_gaze, save_fixation_map
from .uncertainty import contrast_uncertainty, opacity_uncertainty, split_by_uncertainty

logger = logging.getLogger(__name__)

EVENTS_FILE = "events.jsonl"
MANIFEST_FILE = "manifest.jsonl"
FIXMAP_DIR = "fixmaps"


def read_dataset_meta(root):
    path = Path(root) / "dataset.json"
    if not path.exists():
        raise MissingDataError(f"no dataset.json under {root}")
    meta = json.loads(path.read_text())
    meta.setdefault("input_frame_policy", "last")
    meta.setdefault("premotor_seconds", 3.0)
    if "frame_dims" not in meta:
        raise MissingDataError("dataset.json lacks frame_dims")
    meta.setdefault("gaze_source_dims", meta["frame_dims"])
    return meta


def read_frame_index(root):
    path = Path(root) / "frames.csv"
    if not path.exists():
        raise MissingDataError(f"frame index not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    times = np.array([float(r["t"]) for r in rows])
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise InvalidParameterError("frames.csv must be sorted by time")
    return times, [r["path"] for r in rows]


def load_frame(path):
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"frame not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def detect_turns(root, source="steering", **params):
    """Detect turns from the root's steering or geo log and write ``events.jsonl``."""
    root = Path(root)
    meta = read_dataset_meta(root)
    params.setdefault("premotor_seconds", meta["premotor_seconds"])
    params.setdefault("input_frame_policy", meta["input_frame_policy"])
    if source == "steering":
        events = detect_steering_turns(read_steering(root / "steering.csv"), **params)
    elif source == "geo":
        events = detect_geo_turns(read_geo(root / "geo.csv"), **params)
    else:
        raise InvalidParameterError(f"unknown turn source {source!r}")
    for i, ev in enumerate(events):
        ev.event_id = f"e{i:05d}"
    write_events(root / EVENTS_FILE, events)
    logger.info("detected %d turns from %s", len(events), source)
    return events


def _events(root):
    path = Path(root) / EVENTS_FILE
    if not path.exists():
        raise MissingDataError(f"{path} not found; run detect-turns first")
    return read_events(path)


def build_fixmaps(root, sigma=None, duration_weighting=False):
    """One fixation map per event over its premotor window; returns id -> relative path.

    Events whose window has no valid gaze are left out of the mapping.
    """
    root = Path(root)
    meta = read_dataset_meta(root)
    frame_dims = tuple(meta["frame_dims"])
    gaze = read_gaze(root / "gaze.csv").rescaled(meta["gaze_source_dims"], frame_dims)
    (root / FIXMAP_DIR).mkdir(exist_ok=True)
    out = {}
    for ev in _events(root):
        lo, hi = np.searchsorted(gaze.t, ev.premotor[0], "left"), np.searchsorted(gaze.t, ev.premotor[1], "right")
        keep = np.zeros(gaze.t.size, dtype=bool)
        keep[lo:hi] = True
        trace = gaze.select(keep)
        if not np.any(trace.valid):
            logger.warning("event %s has no valid gaze in its premotor window", ev.event_id)
            continue
        fmap = build_fixation_map(trace, ev.premotor, frame_dims, sigma, duration_weighting)
        rel = f"{FIXMAP_DIR}/{ev.event_id}.npy"
        save_fixation_map(root / rel, fmap)
        out[ev.event_id] = rel
    return out


def _existing_fixmaps(root, events):
    return {ev.event_id: f"{FIXMAP_DIR}/{ev.event_id}.npy" for ev in events
            if (Path(root) / FIXMAP_DIR / f"{ev.event_id}.npy").exists()}


def _trial_metadata(root, events, tolerance=0.5):
    path = Path(root) / "trials.jsonl"
    if not path.exists():
        raise MissingDataError(f"opacity uncertainty needs {path}")
    trials = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    times = np.array([float(t["t_event"]) for t in trials])
    out = {}
    for ev in events:
        if times.size == 0:
            break
        k = int(np.argmin(np.abs(times - ev.t_event)))
        if abs(times[k] - ev.t_event) <= tolerance:
            out[ev.event_id] = trials[k]
    return out


def preprocess(root, uncertainty_source="contrast", rule="median", threshold=None):
    """Select input frames, score uncertainty, tag splits and write ``manifest.jsonl``.

    Contrast uncertainty is computed on the selected input frame (lower
    contrast is more uncertain); opacity comes from ``trials.jsonl``
    matched by event time (higher opacity is more uncertain).
    """
    root = Path(root)
    events = _events(root)
    times, paths = read_frame_index(root)
    fixmaps = _existing_fixmaps(root, events)

    frames, values = {}, {}
    for ev in events:
        try:
            frames[ev.event_id] = paths[select_input_frame(ev, times)]
        except MissingDataError as exc:
            logger.warning("%s", exc)

    if uncertainty_source == "contrast":
        direction = "lower-is-uncertain"
        for eid, rel in frames.items():
            values[eid] = contrast_uncertainty(load_frame(root / rel))
    elif uncertainty_source == "opacity":
        direction = "higher-is-uncertain"
        for eid, meta in _trial_metadata(root, events).items():
            try:
                values[eid] = opacity_uncertainty(meta)
            except MissingDataError as exc:
                logger.warning("event %s: %s", eid, exc)
    else:
        raise InvalidParameterError(f"unknown uncertainty source {uncertainty_source!r}")

    usable = [eid for eid in values if eid in frames and eid in fixmaps]
    split = split_by_uncertainty([values[e] for e in usable], rule, direction, threshold)
    labels = dict(zip(usable, split.labels([values[e] for e in usable], uncertainty_source)))
    manifest = assemble_dataset(events, frames, fixmaps, labels)
    manifest.write(root / MANIFEST_FILE)
    (root / "uncertainty.json").write_text(json.dumps(
        {"source": uncertainty_source, "rule": rule, "direction": direction,
         "threshold": split.threshold, "counts": split.counts}, indent=2, sort_keys=True))
    return manifest
