"""Frame samples, on-disk dataset layouts and deterministic splits.

Layout of an InstanceMotSeg-style root::

    root/index.jsonl                       one JSON record per frame
    root/sequences/<seq>/image_t/<frame>.png
    root/sequences/<seq>/image_t1/<frame>.png
    root/sequences/<seq>/flow/<frame>.flo
    root/sequences/<seq>/masks/<frame>.png  indexed, 0 = background

An index record looks like::

    {"sequence_id": "0000", "frame_id": "000003",
     "instances": [{"id": 1, "category": "car", "moving": true,
                    "box": [x1, y1, x2, y2]}]}
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

CATEGORIES: Tuple[str, ...] = ("car", "truck", "van", "pedestrian", "cyclist")
GENERIC = "generic"
FLO_MAGIC = 202021.25
BOX_SLACK = 2
TEST_FRACTION = 0.2


class DatasetError(Exception):
    """Raised when a dataset on disk cannot be loaded."""


class IndexParseError(DatasetError):
    def __init__(self, path: Path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class FlowFormatError(DatasetError):
    """Wrong magic number or inconsistent header in a .flo file."""


class FlowLengthError(FlowFormatError):
    """Payload shorter than the header announces."""


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u/v shape mismatch: {self.u.shape} vs {self.v.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape

    def stack(self) -> np.ndarray:
        """(H, W, 2) array of (u, v)."""
        return np.stack([self.u, self.v], axis=-1)

    def hflip(self) -> "FlowField":
        return FlowField(-self.u[:, ::-1].copy(), self.v[:, ::-1].copy())


@dataclass
class InstanceAnnotation:
    instance_id: int
    category: str
    moving: bool
    box: Tuple[float, float, float, float]
    mask: np.ndarray

    def validate(self, allow_generic: bool = False) -> None:
        if self.instance_id < 1:
            raise ValueError(f"instance id must be >= 1, got {self.instance_id}")
        if self.category == GENERIC:
            if not allow_generic:
                raise ValueError("category 'generic' only allowed in class-agnostic datasets")
        elif self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        ys, xs = np.nonzero(self.mask)
        if len(xs) and (
            xs.min() < x1 - BOX_SLACK
            or xs.max() + 1 > x2 + BOX_SLACK
            or ys.min() < y1 - BOX_SLACK
            or ys.max() + 1 > y2 + BOX_SLACK
        ):
            raise ValueError(f"instance {self.instance_id}: mask extends outside box {self.box}")


@dataclass
class FrameSample:
    frame_id: str
    sequence_id: str
    image_t: np.ndarray
    image_t1: Optional[np.ndarray] = None
    flow: Optional[FlowField] = None
    annotations: List[InstanceAnnotation] = field(default_factory=list)

    def __post_init__(self):
        h, w = self.image_t.shape[:2]
        if self.image_t1 is not None and self.image_t1.shape[:2] != (h, w):
            raise ValueError(f"{self.key}: image_t1 size {self.image_t1.shape[:2]} != {(h, w)}")
        if self.flow is not None and self.flow.shape != (h, w):
            raise ValueError(f"{self.key}: flow size {self.flow.shape} != {(h, w)}")

    @property
    def key(self) -> str:
        return f"{self.sequence_id}/{self.frame_id}"

    @property
    def size(self) -> Tuple[int, int]:
        return self.image_t.shape[:2]

    @property
    def negative_frame(self) -> bool:
        return not any(a.moving for a in self.annotations)

    def moving_mask(self) -> np.ndarray:
        out = np.zeros(self.size, dtype=bool)
        for a in self.annotations:
            if a.moving:
                out |= a.mask.astype(bool)
        return out


# --------------------------------------------------------------------------
# Middlebury .flo container


def write_flow(flow: FlowField, path) -> None:
    h, w = flow.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(flow.stack().astype("<f4").tobytes())


def read_flow(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FlowLengthError(f"{path}: header truncated ({len(raw)} bytes)")
    (magic,) = struct.unpack("<f", raw[:4])
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: bad dimensions {w}x{h}")
    need = 2 * w * h * 4
    if len(raw) - 12 < need:
        raise FlowLengthError(f"{path}: expected {need} payload bytes, found {len(raw) - 12}")
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(data[..., 0].copy(), data[..., 1].copy())


# --------------------------------------------------------------------------
# raster helpers


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_indexed(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I;16", "I"):
            im = im.convert("L")
        return np.asarray(im).astype(np.int64)


def write_png(array: np.ndarray, path) -> None:
    # PNG writer without timestamps, so identical arrays give identical bytes
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def mask_box(mask: np.ndarray) -> Tuple[int, int, int, int]:
    """Tight pixel-edge box (x1, y1, x2, y2) of a binary mask, x2/y2 exclusive."""
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


# --------------------------------------------------------------------------
# splits


def num_test_frames(n: int) -> int:
    return int(math.floor(TEST_FRACTION * n + 0.5))


def split_sequence(frame_ids: Sequence[str], split: Optional[str]) -> List[str]:
    """Tail split: the last 20% of a sequence's frames form the test part."""
    ordered = sorted(frame_ids)
    cut = len(ordered) - num_test_frames(len(ordered))
    if split is None or split == "all":
        return ordered
    if split == "train":
        return ordered[:cut]
    if split == "test":
        return ordered[cut:]
    raise ValueError(f"unknown split {split!r}; expected 'train', 'test' or 'all'")


# --------------------------------------------------------------------------
# loaders


def _parse_index(path: Path) -> List[dict]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise IndexParseError(path, lineno, f"invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise IndexParseError(path, lineno, "record is not an object")
            for key in ("sequence_id", "frame_id", "instances"):
                if key not in rec:
                    raise IndexParseError(path, lineno, f"missing field {key!r}")
            for inst in rec["instances"]:
                missing = {"id", "category", "moving", "box"} - set(inst)
                if missing:
                    raise IndexParseError(path, lineno, f"instance missing {sorted(missing)}")
                if len(inst["box"]) != 4:
                    raise IndexParseError(path, lineno, "box must have 4 numbers")
            rec["_line"] = lineno
            records.append(rec)
    return records


def _require(path: Path) -> Path:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    return path


def load_instancemotseg(root, split: Optional[str] = "train", load_images: bool = True) -> List[FrameSample]:
    """Load an InstanceMotSeg-style root; ``split=None`` returns every frame."""
    root = Path(root)
    index_path = _require(root / "index.jsonl")
    records = _parse_index(index_path)

    by_seq = {}
    for rec in records:
        by_seq.setdefault(str(rec["sequence_id"]), {})[str(rec["frame_id"])] = rec

    samples = []
    for seq in sorted(by_seq):
        frames = by_seq[seq]
        for fid in split_sequence(list(frames), split):
            rec = frames[fid]
            seq_dir = root / "sequences" / seq
            image_t = read_rgb(_require(seq_dir / "image_t" / f"{fid}.png"))
            t1_path = seq_dir / "image_t1" / f"{fid}.png"
            image_t1 = read_rgb(t1_path) if t1_path.is_file() else None
            flow = read_flow(_require(seq_dir / "flow" / f"{fid}.flo"))
            index_mask = read_indexed(_require(seq_dir / "masks" / f"{fid}.png"))
            if index_mask.shape != image_t.shape[:2]:
                raise DatasetError(f"{seq_dir / 'masks' / f'{fid}.png'}: size mismatch with image")
            annotations = []
            for inst in rec["instances"]:
                ann = InstanceAnnotation(
                    instance_id=int(inst["id"]),
                    category=str(inst["category"]),
                    moving=bool(inst["moving"]),
                    box=tuple(float(x) for x in inst["box"]),
                    mask=index_mask == int(inst["id"]),
                )
                try:
                    ann.validate()
                except ValueError as e:
                    raise IndexParseError(index_path, rec["_line"], str(e)) from None
                annotations.append(ann)
            samples.append(
                FrameSample(
                    frame_id=fid,
                    sequence_id=seq,
                    image_t=image_t,
                    image_t1=image_t1,
                    flow=flow,
                    annotations=annotations,
                )
            )
    return samples


def load_class_agnostic(root) -> List[FrameSample]:
    """DAVIS-style root: ``JPEGImages/<seq>/<frame>.*`` and ``Annotations/<seq>/<frame>.png``.

    Every instance becomes a moving, ``generic`` annotation; ids come from mask values.
    The next frame of a sequence, when present, is attached as ``image_t1``.
    """
    root = Path(root)
    img_root, ann_root = root / "JPEGImages", root / "Annotations"
    if not img_root.is_dir() or not ann_root.is_dir():
        raise DatasetError(f"{root}: expected JPEGImages/ and Annotations/ folders")

    samples = []
    for seq_dir in sorted(p for p in img_root.iterdir() if p.is_dir()):
        frames = sorted(p for p in seq_dir.iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png"))
        for i, img_path in enumerate(frames):
            mask_path = _require(ann_root / seq_dir.name / f"{img_path.stem}.png")
            image = read_rgb(img_path)
            index_mask = read_indexed(mask_path)
            if index_mask.shape != image.shape[:2]:
                raise DatasetError(f"{mask_path}: mask size {index_mask.shape} != image size {image.shape[:2]}")
            image_t1 = read_rgb(frames[i + 1]) if i + 1 < len(frames) else None
            annotations = []
            for iid in np.unique(index_mask):
                if iid == 0:
                    continue
                m = index_mask == iid
                annotations.append(InstanceAnnotation(int(iid), GENERIC, True, mask_box(m), m))
            samples.append(
                FrameSample(
                    frame_id=img_path.stem,
                    sequence_id=seq_dir.name,
                    image_t=image,
                    image_t1=image_t1,
                    annotations=annotations,
                )
            )
    return samples


def write_sample(root, sample: FrameSample, index_file) -> None:
    """Write one sample into an InstanceMotSeg-style layout and append its index record."""
    seq_dir = Path(root) / "sequences" / sample.sequence_id
    for sub in ("image_t", "image_t1", "flow", "masks"):
        (seq_dir / sub).mkdir(parents=True, exist_ok=True)
    fid = sample.frame_id
    write_png(sample.image_t, seq_dir / "image_t" / f"{fid}.png")
    if sample.image_t1 is not None:
        write_png(sample.image_t1, seq_dir / "image_t1" / f"{fid}.png")
    if sample.flow is not None:
        write_flow(sample.flow, seq_dir / "flow" / f"{fid}.flo")
    index_mask = np.zeros(sample.size, dtype=np.uint8)
    for a in sample.annotations:
        index_mask[a.mask.astype(bool)] = a.instance_id
    write_png(index_mask, seq_dir / "masks" / f"{fid}.png")
    rec = {
        "sequence_id": sample.sequence_id,
        "frame_id": fid,
        "instances": [
            {"id": a.instance_id, "category": a.category, "moving": a.moving, "box": [float(x) for x in a.box]}
            for a in sample.annotations
        ],
    }
    index_file.write(json.dumps(rec, sort_keys=True) + "\n")
