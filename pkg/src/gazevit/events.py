"""Turn-event extraction from steering or geo traces, frame selection and manifests."""

import csv
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InvalidParameterError, MissingDataError

EARTH_RADIUS_M = 6_371_008.8


@dataclass
class SteeringTrace:
    t: np.ndarray
    angle: np.ndarray  # degrees, positive = rightward

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).ravel()
        self.angle = np.asarray(self.angle, dtype=np.float64).ravel()
        if self.t.shape != self.angle.shape:
            raise InvalidParameterError("steering t and angle must have equal length")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.angle))):
            raise InvalidParameterError("steering trace contains non-finite values")
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise InvalidParameterError("steering timestamps must be strictly increasing")


@dataclass
class GeoTrace:
    t: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    speed: np.ndarray  # m/s

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).ravel()
        self.lat = np.asarray(self.lat, dtype=np.float64).ravel()
        self.lon = np.asarray(self.lon, dtype=np.float64).ravel()
        self.speed = np.asarray(self.speed, dtype=np.float64).ravel()
        if not (self.t.shape == self.lat.shape == self.lon.shape == self.speed.shape):
            raise InvalidParameterError("geo trace columns must have equal length")
        if np.any(np.abs(self.lat) > 90) or np.any(np.abs(self.lon) > 180):
            raise InvalidParameterError("positions out of range")
        if np.any(self.speed < 0):
            raise InvalidParameterError("speed must be nonnegative")


@dataclass
class TurnEvent:
    label: str
    t_event: float
    premotor: tuple
    input_frame_policy: str = "last"
    source: str = "steering"
    event_id: str = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in ("left", "right"):
            raise InvalidParameterError(f"label must be left or right, got {self.label!r}")
        if self.input_frame_policy not in ("last", "first"):
            raise InvalidParameterError(f"unknown input frame policy {self.input_frame_policy!r}")
        t0, t1 = self.premotor
        if not t1 > t0:
            raise InvalidParameterError(f"premotor interval must have positive length, got {self.premotor}")
        self.premotor = (float(t0), float(t1))


def _window_max_before(t, values, lookbehind):
    """For each i, max of ``values[j]`` over ``t[i] - lookbehind <= t[j] < t[i]`` (-inf if none)."""
    out = np.full(t.size, -np.inf)
    window = deque()  # indices with decreasing values
    for i in range(t.size):
        while window and t[window[0]] < t[i] - lookbehind:
            window.popleft()
        if window:
            out[i] = values[window[0]]
        while window and values[window[-1]] <= values[i]:
            window.pop()
        window.append(i)
    return out


def detect_steering_turns(trace, lookbehind=0.75, min_amplitude=5.0, premotor_seconds=3.0,
                          input_frame_policy="last"):
    """Steering peaks (right) and troughs (left) that are true peaks of |angle|.

    A sample qualifies when |angle| exceeds ``min_amplitude``, is strictly
    greater than every sample in the preceding ``lookbehind`` seconds and is
    not exceeded by the next sample; on a plateau the earliest sample wins.
    Qualifying samples are taken in time order and any sample closer than
    ``lookbehind`` to the last accepted event is skipped, so the look-behind
    windows of accepted events never overlap.
    """
    if trace.t.size < 3:
        return []
    mag = np.abs(trace.angle)
    before = _window_max_before(trace.t, mag, lookbehind)
    nxt = np.append(mag[1:], np.inf)
    candidates = np.flatnonzero((mag > min_amplitude) & (mag > before) & (mag >= nxt))
    events, last = [], -np.inf
    for i in candidates:
        if i == 0 or i == trace.t.size - 1:
            continue
        t = float(trace.t[i])
        if t - last < lookbehind:
            continue
        events.append(TurnEvent(
            "right" if trace.angle[i] > 0 else "left", t, (t - premotor_seconds, t),
            input_frame_policy, "steering", meta={"angle": float(trace.angle[i])},
        ))
        last = t
    return events


def bearing(lat1, lon1, lat2, lon2):
    """Initial great-circle bearing in degrees clockwise from north."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dl = np.radians(lon2 - lon1)
    x = np.sin(dl) * np.cos(p2)
    y = np.cos(p1) * np.sin(p2) - np.sin(p1) * np.cos(p2) * np.cos(dl)
    return np.degrees(np.arctan2(x, y))


def path_distance(lat, lon):
    """Cumulative haversine distance along a track in metres, starting at 0."""
    p = np.radians(lat)
    dp, dl = np.diff(p), np.radians(np.diff(lon))
    h = np.sin(dp / 2) ** 2 + np.cos(p[:-1]) * np.cos(p[1:]) * np.sin(dl / 2) ** 2
    seg = 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return np.concatenate([[0.0], np.cumsum(seg)])


def detect_geo_turns(trace, heading_change_threshold=45.0, window=3.0, min_speed=1.0,
                     premotor_seconds=1.0, input_frame_policy="first", baseline_m=15.0, release=0.5):
    """Turns from position/speed streams.

    The heading at each fix is the bearing to the first later fix at least
    ``baseline_m`` metres along the track (a forward difference; 0 means the
    next fix), which keeps GPS jitter from dominating short steps. At each
    sample the signed heading change over the preceding ``window`` seconds
    is accumulated; a run of samples whose change stays beyond
    ``+threshold`` (right) or ``-threshold`` (left) while the car moves at
    ``min_speed`` or faster is one turn, timestamped where the run starts;
    the run lasts until the change falls back under ``release`` times the
    threshold. Turns closer than ``window`` to the previous one are dropped.
    """
    if window <= 0:
        raise InvalidParameterError("window must be positive")
    if baseline_m < 0:
        raise InvalidParameterError("baseline_m must be nonnegative")
    n = trace.t.size
    if n < 2:
        return []
    dist = path_distance(trace.lat, trace.lon)
    ahead = np.maximum(np.searchsorted(dist, dist + baseline_m, side="left"), np.arange(n) + 1)
    m = int(np.count_nonzero(ahead < n))
    if m < 2:
        return []
    k = np.arange(m)
    heading = bearing(trace.lat[k], trace.lon[k], trace.lat[ahead[k]], trace.lon[ahead[k]])
    step = (np.diff(heading) + 180.0) % 360.0 - 180.0
    cumulative = np.concatenate([[0.0], np.cumsum(step)])
    t = trace.t[:m]
    moving = trace.speed[:m] >= min_speed

    lo = np.searchsorted(t, t - window, side="left")
    change = cumulative - cumulative[lo]

    # a turn latches when |change| crosses the threshold and re-arms once it
    # falls below ``release * threshold``, so jitter at the crossing cannot
    # split one turn into two
    events, last, latched = [], -np.inf, 0
    for i in range(m):
        if latched and latched * change[i] < release * heading_change_threshold:
            latched = 0
        if latched or not moving[i] or abs(change[i]) <= heading_change_threshold:
            continue
        latched = 1 if change[i] > 0 else -1
        te = float(t[i])
        if te - last < window:
            continue
        events.append(TurnEvent(
            "right" if latched > 0 else "left", te, (te - premotor_seconds, te),
            input_frame_policy, "geo", meta={"heading_change": float(change[i])},
        ))
        last = te
    return events


def select_input_frame(event, frame_times, frames=None):
    """Pick the frame at the premotor boundary named by the event's policy.

    The chosen frame is the latest one at or before the boundary, so no
    post-boundary information leaks in. ``frame_times`` must be sorted;
    returns the frame index, or ``frames[index]`` when ``frames`` is given.
    """
    frame_times = np.asarray(frame_times, dtype=np.float64)
    t0, t1 = event.premotor
    eps = 1e-9
    if frame_times.size == 0 or frame_times[0] > t0 + eps or frame_times[-1] < t1 - eps:
        raise MissingDataError(
            f"frames do not cover premotor interval {event.premotor} of event {event.event_id or event.t_event}"
        )
    boundary = t1 if event.input_frame_policy == "last" else t0
    index = int(np.searchsorted(frame_times, boundary + eps, side="right") - 1)
    return index if frames is None else frames[index]


# --- manifests ----------------------------------------------------------

MANIFEST_FIELDS = (
    "id", "label", "frame", "fixation", "uncertainty", "uncertainty_source", "uncertainty_split",
    "source", "t_event", "premotor",
)


@dataclass
class Manifest:
    records: list
    rejects: list

    def __len__(self):
        return len(self.records)

    @property
    def left_fraction(self):
        if not self.records:
            return float("nan")
        return sum(r["label"] == "left" for r in self.records) / len(self.records)

    def write(self, path):
        """One JSON object per line; accepted records first, then ``status: rejected`` lines."""
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps({**{k: rec.get(k) for k in MANIFEST_FIELDS}, "status": "ok"}) + "\n")
            for rej in self.rejects:
                fh.write(json.dumps({"id": rej["id"], "status": "rejected", "reason": rej["reason"]}) + "\n")
        return Path(path)

    @classmethod
    def read(cls, path):
        path = Path(path)
        if not path.exists():
            raise MissingDataError(f"manifest not found: {path}")
        records, rejects = [], []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                status = row.pop("status", "ok")
                (records if status == "ok" else rejects).append(row)
        return cls(records, rejects)

    def subset(self, ids):
        wanted = set(ids)
        return Manifest([r for r in self.records if r["id"] in wanted], [])


def assemble_dataset(events, frames, fixations, uncertainty):
    """Join per-event artifacts into a manifest.

    ``frames`` and ``fixations`` map event id to a path relative to the
    dataset root; ``uncertainty`` maps event id to an ``UncertaintyLabel``
    (or anything with ``value``, ``source`` and ``split``). Events lacking an
    artifact go to ``rejects`` with the reason, never silently dropped.
    """
    seen, records, rejects = set(), [], []
    for event in events:
        eid = event.event_id
        if eid is None:
            raise InvalidParameterError("every event needs an event_id")
        if eid in seen:
            raise InvalidParameterError(f"duplicate event id {eid!r}")
        seen.add(eid)
        if frames.get(eid) is None:
            rejects.append({"id": eid, "reason": "missing frame"})
            continue
        if fixations.get(eid) is None:
            rejects.append({"id": eid, "reason": "missing gaze"})
            continue
        unc = uncertainty.get(eid)
        if unc is None:
            rejects.append({"id": eid, "reason": "missing uncertainty"})
            continue
        records.append({
            "id": eid,
            "label": event.label,
            "frame": str(frames[eid]),
            "fixation": str(fixations[eid]),
            "uncertainty": float(unc.value),
            "uncertainty_source": unc.source,
            "uncertainty_split": unc.split,
            "source": event.source,
            "t_event": event.t_event,
            "premotor": list(event.premotor),
        })
    return Manifest(records, rejects)


def read_steering(path):
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"steering file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t" if path.suffix == ".tsv" else ","))
    return SteeringTrace([float(r["t"]) for r in rows], [float(r["angle"]) for r in rows])


def read_geo(path):
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"geo file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t" if path.suffix == ".tsv" else ","))
    return GeoTrace(*([float(r[k]) for r in rows] for k in ("t", "lat", "lon", "speed")))


def write_events(path, events):
    with open(path, "w") as fh:
        for ev in events:
            row = asdict(ev)
            row["premotor"] = list(ev.premotor)
            fh.write(json.dumps(row) + "\n")
    return Path(path)


def read_events(path):
    events = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                row["premotor"] = tuple(row["premotor"])
                events.append(TurnEvent(**row))
    return events
