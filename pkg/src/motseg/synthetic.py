"""Moving-shapes scenes with exact optical flow and world-frame motion labels.

The camera translates by ``ego_translation`` pixels per frame over a textured
background, so static content shows an apparent flow of ``-ego``. A shape with
world velocity ``v`` shows ``v - ego``. Motion ground truth is defined in the
world frame: a shape is moving iff ``v != 0``.

Alongside the images the generator writes, per sequence, ego poses and
object tracklets in the annotation text formats (``poses.txt``,
``tracklets.txt``) plus ``motion_gt.txt`` with the true flags, so the
auto-labelling path can be checked end to end.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image

from .annotation import EgoPose, TrackRecord, Tracklet, write_poses, write_tracklets
from .datasets import FlowField, FrameSample, InstanceAnnotation, mask_box, write_sample

SHAPE_KINDS = ("rectangle", "ellipse", "triangle")
KIND_CATEGORY = {"rectangle": "car", "ellipse": "pedestrian", "triangle": "cyclist"}
MAX_RESAMPLE = 100
MIN_VISIBLE_FRACTION = 0.5
UNIFORM_COLOR = (220, 60, 60)


class GenerationError(RuntimeError):
    pass


@dataclass
class SyntheticSceneConfig:
    image_size: Tuple[int, int] = (128, 128)
    num_shapes: int = 4
    shape_kinds: Tuple[str, ...] = SHAPE_KINDS
    ego_translation: Tuple[int, int] = (2, 0)
    velocity_range: Tuple[int, int] = (2, 4)
    moving_fraction: float = 0.5
    frames_per_sequence: int = 8
    num_sequences: int = 1
    seed: int = 0
    shape_size_range: Tuple[int, int] = (16, 36)
    uniform_appearance: bool = False
    meters_per_pixel: float = 0.25
    frame_rate: float = 10.0

    def validate(self) -> None:
        h, w = self.image_size
        if h < 64 or w < 64:
            raise ValueError(f"image_size must be at least 64x64, got {self.image_size}")
        if not 0.0 <= self.moving_fraction <= 1.0:
            raise ValueError(f"moving_fraction must lie in [0, 1], got {self.moving_fraction}")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown or not self.shape_kinds:
            raise ValueError(f"shape_kinds must be a non-empty subset of {SHAPE_KINDS}")
        lo, hi = self.velocity_range
        if not (isinstance(lo, int) and isinstance(hi, int) and 1 <= lo <= hi):
            raise ValueError(f"velocity_range must be integers 1 <= lo <= hi, got {self.velocity_range}")
        smin, smax = self.shape_size_range
        if not 4 <= smin <= smax <= min(h, w) // 2:
            raise ValueError(f"bad shape_size_range {self.shape_size_range}")
        if self.frames_per_sequence < 1 or self.num_sequences < 1 or self.num_shapes < 0:
            raise ValueError("frames_per_sequence, num_sequences must be >= 1 and num_shapes >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneConfig":
        d = dict(d)
        for k in ("image_size", "ego_translation", "velocity_range", "shape_size_range", "shape_kinds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class _Shape:
    object_id: int
    kind: str
    template: np.ndarray  # (h, w) bool
    color: Tuple[int, int, int]
    pos0: np.ndarray  # top-left in image coords at step 0
    velocity: np.ndarray  # world px/frame
    apparent: np.ndarray  # velocity - ego

    def pos(self, step: int) -> np.ndarray:
        return self.pos0 + step * self.apparent

    @property
    def moving(self) -> bool:
        return bool(np.any(self.velocity != 0))


@dataclass
class SyntheticSequence:
    sequence_id: str
    samples: List[FrameSample]
    poses: List[EgoPose]
    tracklets: List[Tracklet]
    motion_gt: Dict[int, bool] = field(default_factory=dict)


def shape_template(kind: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    if kind == "ellipse":
        return ((xx - w / 2) / (w / 2)) ** 2 + ((yy - h / 2) / (h / 2)) ** 2 <= 1.0
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        half = (yy / h) * (w / 2)
        return np.abs(xx - w / 2) <= half
    raise ValueError(f"unknown shape kind {kind!r}")


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.integers(40, 150, size=(h // 8 + 2, w // 8 + 2, 3), dtype=np.uint8)
    smooth = np.asarray(Image.fromarray(coarse).resize((w, h), Image.BILINEAR), dtype=np.int16)
    grain = rng.integers(-12, 13, size=(h, w, 3), dtype=np.int16)
    return np.clip(smooth + grain, 0, 255).astype(np.uint8)


def _paint(canvas, shape: _Shape, step: int, tex) -> None:
    y, x = shape.pos(step)
    h, w = shape.template.shape
    region = canvas[y : y + h, x : x + w]
    region[shape.template] = tex[shape.template]


def _visible_masks(shapes: List[_Shape], step: int, size) -> List[np.ndarray]:
    """Per-shape visible mask at ``step``; later shapes are drawn on top."""
    H, W = size
    owner = np.zeros((H, W), dtype=np.int32)
    for i, s in enumerate(shapes):
        y, x = s.pos(step)
        h, w = s.template.shape
        owner[y : y + h, x : x + w][s.template] = i + 1
    return [owner == i + 1 for i in range(len(shapes))]


def _sample_shape(rng, cfg: SyntheticSceneConfig, object_id: int, moving: bool, ego: np.ndarray, steps: int) -> _Shape:
    H, W = cfg.image_size
    kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
    smin, smax = cfg.shape_size_range
    h, w = (int(v) for v in rng.integers(smin, smax + 1, size=2))
    if cfg.uniform_appearance:
        color = UNIFORM_COLOR
    else:
        color = tuple(int(c) for c in rng.integers(150, 256, size=3))
    if moving:
        lo, hi = cfg.velocity_range
        while True:
            v = rng.integers(-hi, hi + 1, size=2)
            if lo <= np.abs(v).max() <= hi:
                break
    else:
        v = np.zeros(2, dtype=np.int64)
    vel = np.array([v[1], v[0]], dtype=np.int64)  # stored as (dy, dx)
    apparent = vel - ego
    # feasible top-left range keeping the shape inside the frame for all steps
    ends = apparent * steps
    ylo, yhi = max(0, -ends[0]), min(H - h, H - h - ends[0])
    xlo, xhi = max(0, -ends[1]), min(W - w, W - w - ends[1])
    if ylo > yhi or xlo > xhi:
        return None
    pos0 = np.array([rng.integers(ylo, yhi + 1), rng.integers(xlo, xhi + 1)], dtype=np.int64)
    return _Shape(object_id, kind, shape_template(kind, h, w), color, pos0, vel, apparent)


def render_sequence(cfg: SyntheticSceneConfig, seq_index: int, rng: np.random.Generator) -> SyntheticSequence:
    cfg.validate()
    H, W = cfg.image_size
    F = cfg.frames_per_sequence
    steps = F  # rendered steps 0..F: frame f uses steps f and f+1
    ego = np.array([cfg.ego_translation[1], cfg.ego_translation[0]], dtype=np.int64)  # (dy, dx)

    span = np.abs(ego) * steps
    tex_bg = _background(rng, H + int(span[0]), W + int(span[1]))
    origin = np.where(ego < 0, span, 0)

    n_moving = int(np.floor(cfg.moving_fraction * cfg.num_shapes + 0.5))
    moving_ids = set(int(i) for i in rng.permutation(cfg.num_shapes)[:n_moving])

    shapes: List[_Shape] = []
    for i in range(cfg.num_shapes):
        for _ in range(MAX_RESAMPLE):
            cand = _sample_shape(rng, cfg, i + 1, i in moving_ids, ego, steps)
            if cand is None:
                continue
            trial = shapes + [cand]
            ok = all(
                m.sum() >= MIN_VISIBLE_FRACTION * s.template.sum()
                for step in range(steps + 1)
                for s, m in zip(trial, _visible_masks(trial, step, (H, W)))
            )
            if ok:
                shapes.append(cand)
                break
        else:
            raise GenerationError(
                f"sequence {seq_index}: could not place shape {i + 1} after {MAX_RESAMPLE} attempts"
            )

    textures = [np.broadcast_to(np.array(s.color, dtype=np.uint8), s.template.shape + (3,)) for s in shapes]

    def render(step: int) -> np.ndarray:
        oy, ox = origin + step * ego
        canvas = tex_bg[oy : oy + H, ox : ox + W].copy()
        for s, tex in zip(shapes, textures):
            _paint(canvas, s, step, tex)
        return canvas

    frames = [render(step) for step in range(steps + 1)]
    seq_id = f"{seq_index:04d}"
    samples = []
    for f in range(F):
        vis = _visible_masks(shapes, f, (H, W))
        u = np.full((H, W), -ego[1], dtype=np.float32)
        v = np.full((H, W), -ego[0], dtype=np.float32)
        annotations = []
        for s, m in zip(shapes, vis):
            u[m] = s.apparent[1]
            v[m] = s.apparent[0]
            annotations.append(InstanceAnnotation(s.object_id, KIND_CATEGORY[s.kind], s.moving, mask_box(m), m))
        samples.append(
            FrameSample(
                frame_id=f"{f:06d}",
                sequence_id=seq_id,
                image_t=frames[f],
                image_t1=frames[f + 1],
                flow=FlowField(u, v),
                annotations=annotations,
            )
        )

    mpp, rate = cfg.meters_per_pixel, cfg.frame_rate
    poses = []
    for step in range(steps + 1):
        cam = origin + step * ego  # camera offset in world pixels (dy, dx)
        poses.append(EgoPose(step / rate, np.array([cam[1] * mpp, cam[0] * mpp, 0.0]), np.eye(3)))
    tracklets = []
    for s in shapes:
        h, w = s.template.shape
        recs = []
        for step in range(steps + 1):
            cy, cx = s.pos(step) + np.array([h / 2, w / 2])
            recs.append(TrackRecord(step / rate, np.array([cx * mpp, cy * mpp, 0.0])))
        tracklets.append(Tracklet(s.object_id, KIND_CATEGORY[s.kind], recs))
    return SyntheticSequence(seq_id, samples, poses, tracklets, {s.object_id: s.moving for s in shapes})


def render_synthetic(cfg: SyntheticSceneConfig) -> List[SyntheticSequence]:
    cfg.validate()
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.num_sequences)
    return [render_sequence(cfg, i, np.random.default_rng(c)) for i, c in enumerate(children)]


def generate_synthetic(cfg: SyntheticSceneConfig, out) -> List[SyntheticSequence]:
    """Render the dataset and write it under ``out`` (replacing previous contents)."""
    sequences = render_synthetic(cfg)
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    with open(out / "index.jsonl", "w") as index:
        for seq in sequences:
            for sample in seq.samples:
                write_sample(out, sample, index)
    for seq in sequences:
        seq_dir = out / "sequences" / seq.sequence_id
        write_poses(seq.poses, seq_dir / "poses.txt")
        write_tracklets(seq.tracklets, seq_dir / "tracklets.txt")
        with open(seq_dir / "motion_gt.txt", "w") as f:
            for oid in sorted(seq.motion_gt):
                f.write(f"{oid} {int(seq.motion_gt[oid])}\n")
    meta = asdict(cfg)
    (out / "synthetic.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return sequences
