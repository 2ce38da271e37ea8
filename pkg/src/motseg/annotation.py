"""Semi-automatic motion labels from ego poses and object tracklets.

Object centroids arrive in the sensor frame. They are moved into a fixed world
frame with the ego pose of their timestamp, a speed is estimated there, and a
threshold decides moving/static. Working in the world frame is what keeps a
turning ego vehicle from making parked cars look like they move.

Text formats (whitespace separated, ``#`` starts a comment)::

    poses:      timestamp r11 r12 r13 tx r21 r22 r23 ty r31 r32 r33 tz
    tracklets:  object_id category timestamp x y z yaw
    labels:     object_id timestamp speed moving      (header: # threshold=.. window=..)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1.0  # m/s
DEFAULT_WINDOW = 5  # frames
ORTHO_TOL = 1e-6


class AnnotationError(Exception):
    pass


@dataclass(frozen=True)
class EgoPose:
    timestamp: float
    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))

    def validate(self) -> None:
        r = self.rotation
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise AnnotationError(f"pose at t={self.timestamp}: rotation not orthonormal (err {err:.2e})")


@dataclass
class TrackRecord:
    timestamp: float
    centroid: np.ndarray
    yaw: float = 0.0


@dataclass
class Tracklet:
    object_id: int
    category: str
    records: List[TrackRecord] = field(default_factory=list)


@dataclass(frozen=True)
class MotionLabel:
    object_id: int
    timestamp: float
    speed: float
    moving: bool


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_world(point_sensor, pose: EgoPose) -> np.ndarray:
    pose.validate()
    return pose.rotation @ np.asarray(point_sensor, dtype=np.float64) + pose.position


def estimate_speed(track_world: Sequence[Tuple[float, Sequence[float]]], window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Per-record speed from a finite difference spanning ``window`` records.

    The span is centred on the record where possible and shifted inward at
    the sequence ends, giving one-sided differences there.
    """
    if window < 2:
        raise ValueError(f"window must be >= 2, got {window}")
    n = len(track_world)
    if n < window:
        raise ValueError(f"track has {n} records, window needs {window}")
    ts = np.array([t for t, _ in track_world], dtype=np.float64)
    pts = np.array([p for _, p in track_world], dtype=np.float64).reshape(n, -1)
    if np.any(np.diff(ts) <= 0):
        raise AnnotationError("timestamps must be strictly increasing (duplicate or unordered timestamp)")

    speeds = np.empty(n)
    for i in range(n):
        s = min(max(i - (window - 1) // 2, 0), n - window)
        e = s + window - 1
        speeds[i] = np.linalg.norm(pts[e] - pts[s]) / (ts[e] - ts[s])
    return speeds


def label_motion(
    tracklets: Iterable[Tracklet],
    poses: Iterable[EgoPose],
    threshold: float = DEFAULT_THRESHOLD,
    window: int = DEFAULT_WINDOW,
) -> List[MotionLabel]:
    """Moving iff the world-frame speed is strictly above ``threshold``.

    Tracks shorter than ``window`` use their full length; a single-record track
    has no speed evidence and is labelled static at speed 0.
    """
    pose_at: Dict[float, EgoPose] = {}
    for p in poses:
        p.validate()
        pose_at[p.timestamp] = p

    labels = []
    for trk in tracklets:
        recs = sorted(trk.records, key=lambda r: r.timestamp)
        world = []
        for r in recs:
            pose = pose_at.get(r.timestamp)
            if pose is None:
                raise AnnotationError(f"object {trk.object_id}: no ego pose for timestamp {r.timestamp}")
            world.append((r.timestamp, pose.rotation @ np.asarray(r.centroid, dtype=np.float64) + pose.position))
        if len(world) == 1:
            speeds = np.zeros(1)
        else:
            speeds = estimate_speed(world, min(window, len(world)))
        for r, v in zip(recs, speeds):
            labels.append(MotionLabel(trk.object_id, r.timestamp, float(v), bool(v > threshold)))
    return labels


def rasterize_labels(labels, frames, id_map: Optional[Mapping[int, int]] = None):
    """Copy motion flags onto frame annotations.

    ``frames`` maps timestamp -> list of InstanceAnnotation; ``id_map`` maps
    instance_id -> object_id (identity when omitted). Returns the updated
    frames and a list of (timestamp, instance_id) that had no label and were
    set static.
    """
    flags: Dict[Tuple[int, float], bool] = {}
    for lb in labels:
        key = (lb.object_id, lb.timestamp)
        if key in flags and flags[key] != lb.moving:
            raise AnnotationError(f"conflicting labels for object {lb.object_id} at t={lb.timestamp}")
        flags[key] = lb.moving

    out, unlabeled = {}, []
    for ts, anns in frames.items():
        updated = []
        for a in anns:
            obj = id_map.get(a.instance_id, a.instance_id) if id_map else a.instance_id
            moving = flags.get((obj, ts))
            if moving is None:
                unlabeled.append((ts, a.instance_id))
                moving = False
            updated.append(replace(a, moving=moving))
        out[ts] = updated
    if unlabeled:
        log.warning("%d instance(s) without motion label set static", len(unlabeled))
    return out, unlabeled


# --------------------------------------------------------------------------
# text records


def _rows(path):
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def read_poses(path) -> List[EgoPose]:
    poses = []
    for lineno, cols in _rows(path):
        if len(cols) != 13:
            raise AnnotationError(f"{path}:{lineno}: expected 13 numbers, got {len(cols)}")
        vals = [float(x) for x in cols]
        m = np.array(vals[1:]).reshape(3, 4)
        poses.append(EgoPose(vals[0], m[:, 3], m[:, :3]))
    ts = [p.timestamp for p in poses]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise AnnotationError(f"{path}: pose timestamps must be strictly increasing")
    return poses


def write_poses(poses: Sequence[EgoPose], path) -> None:
    with open(path, "w") as f:
        for p in poses:
            m = np.hstack([p.rotation, p.position[:, None]]).reshape(-1)
            f.write(" ".join([repr(float(p.timestamp))] + [repr(float(x)) for x in m]) + "\n")


def read_tracklets(path) -> List[Tracklet]:
    tracks: Dict[int, Tracklet] = {}
    for lineno, cols in _rows(path):
        if len(cols) != 7:
            raise AnnotationError(f"{path}:{lineno}: expected 7 columns, got {len(cols)}")
        oid = int(cols[0])
        trk = tracks.setdefault(oid, Tracklet(oid, cols[1]))
        x, y, z = (float(c) for c in cols[3:6])
        trk.records.append(TrackRecord(float(cols[2]), np.array([x, y, z]), float(cols[6])))
    return [tracks[k] for k in sorted(tracks)]


def write_tracklets(tracklets: Sequence[Tracklet], path) -> None:
    with open(path, "w") as f:
        for trk in tracklets:
            for r in trk.records:
                x, y, z = (float(c) for c in r.centroid)
                f.write(f"{trk.object_id} {trk.category} {float(r.timestamp)!r} {x!r} {y!r} {z!r} {float(r.yaw)!r}\n")


def write_labels(labels: Sequence[MotionLabel], path, threshold: float, window: int) -> None:
    with open(path, "w") as f:
        f.write(f"# threshold={threshold!r} window={window}\n")
        for lb in labels:
            f.write(f"{lb.object_id} {lb.timestamp!r} {lb.speed!r} {int(lb.moving)}\n")


def read_labels(path) -> Tuple[List[MotionLabel], dict]:
    meta = {}
    with open(path) as f:
        first = f.readline()
    if first.startswith("#"):
        for tok in first[1:].split():
            k, _, v = tok.partition("=")
            meta[k] = float(v) if k == "threshold" else int(v)
    labels = [
        MotionLabel(int(c[0]), float(c[1]), float(c[2]), bool(int(c[3])))
        for _, c in _rows(path)
    ]
    return labels, meta
