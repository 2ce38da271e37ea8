"""Alternating two-head training, batching, augmentation and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import CATEGORIES, GENERIC, FlowField, FrameSample, InstanceAnnotation, mask_box
from .features import DEFAULT_MAX_FLOW, motion_raster
from .heads import HEAD_TAGS, ModelConfig, MotSegNet
from .losses import DEFAULT_LOSS_WEIGHTS, HeadTargets, head_losses

log = logging.getLogger(__name__)

# milestones of the reference schedule, relative to an 800k-iteration run
REFERENCE_MILESTONES = (280_000, 600_000)
REFERENCE_ITERATIONS = 800_000
MIN_AUG_AREA = 16


class TrainingDiverged(RuntimeError):
    def __init__(self, phase: str, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} in {phase} phase at iteration {iteration}")
        self.phase = phase
        self.iteration = iteration


@dataclass
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    iterations: int = 2000
    milestones: Optional[Tuple[int, ...]] = None  # None: reference milestones scaled to `iterations`
    alternation_k: int = 1
    input_size: Tuple[int, int] = (128, 128)
    loss_weights: Tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS
    augment: bool = True
    max_shift: float = 0.1
    grad_clip: Optional[float] = None
    log_every: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.alternation_k < 1:
            raise ValueError(f"alternation_k must be >= 1, got {self.alternation_k}")
        ms = self.resolved_milestones()
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be increasing, got {ms}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")

    def resolved_milestones(self) -> Tuple[int, ...]:
        if self.milestones is not None:
            return tuple(int(m) for m in self.milestones)
        return scale_milestones(self.iterations)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("milestones", "input_size", "loss_weights"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def scale_milestones(iterations: int) -> Tuple[int, ...]:
    return tuple(max(1, round(iterations * m / REFERENCE_ITERATIONS)) for m in REFERENCE_MILESTONES)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    drops = sum(iteration >= m for m in cfg.resolved_milestones())
    return cfg.lr * (0.1 ** drops)


def phase_at(iteration: int, k: int) -> str:
    return HEAD_TAGS[(iteration // k) % 2]


def derive_seed(root: int, name: str) -> int:
    """Independent per-purpose seed from the single root seed."""
    return int(np.random.SeedSequence([root, zlib.crc32(name.encode())]).generate_state(1)[0])


# --------------------------------------------------------------------------
# targets and batches


def head_annotations(sample: FrameSample, head_tag: str) -> List[InstanceAnnotation]:
    if head_tag == "semantic":
        return [a for a in sample.annotations if a.category in CATEGORIES]
    # class-agnostic sources mark every instance as moving
    return [a for a in sample.annotations if a.moving or a.category == GENERIC]


def build_targets(sample: FrameSample, head_tag: str, dtype=torch.float32) -> HeadTargets:
    anns = head_annotations(sample, head_tag)
    h, w = sample.size
    if not anns:
        return HeadTargets(torch.zeros((0, 4), dtype=dtype), torch.zeros(0, dtype=torch.long), torch.zeros((0, h, w), dtype=torch.bool))
    boxes = torch.tensor([a.box for a in anns], dtype=dtype)
    if head_tag == "semantic":
        labels = torch.tensor([CATEGORIES.index(a.category) + 1 for a in anns], dtype=torch.long)
    else:
        labels = torch.ones(len(anns), dtype=torch.long)
    masks = torch.from_numpy(np.stack([a.mask.astype(bool) for a in anns]))
    return HeadTargets(boxes, labels, masks)


def make_batch(samples: Sequence[FrameSample], input_mode: str, max_flow: float = DEFAULT_MAX_FLOW, dtype=torch.float32):
    """Stack samples into (image, motion-or-None) tensors on the 0..255 scale."""
    images = torch.from_numpy(np.stack([s.image_t.transpose(2, 0, 1) for s in samples]).astype(np.float32)).to(dtype)
    if input_mode == "rgb":
        return images, None
    motion = torch.from_numpy(np.stack([motion_raster(s, input_mode, max_flow) for s in samples])).to(dtype)
    return images, motion


def resize_sample(sample: FrameSample, size: Tuple[int, int]) -> FrameSample:
    """Resize rasters to ``size``; flow vectors and boxes are rescaled accordingly."""
    h, w = sample.size
    nh, nw = size
    if (h, w) == (nh, nw):
        return sample

    def img(a):
        t = torch.from_numpy(a.transpose(2, 0, 1).astype(np.float32))[None]
        t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
        return t[0].round().clamp(0, 255).byte().numpy().transpose(1, 2, 0)

    flow = None
    if sample.flow is not None:
        t = torch.from_numpy(sample.flow.stack().transpose(2, 0, 1).copy())[None]
        t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0].numpy()
        flow = FlowField(t[0] * nw / w, t[1] * nh / h)
    anns = []
    for a in sample.annotations:
        m = F.interpolate(torch.from_numpy(a.mask.astype(np.float32))[None, None], size=size, mode="nearest")[0, 0].numpy() > 0.5
        if m.sum() == 0:
            continue
        anns.append(replace(a, mask=m, box=mask_box(m)))
    return replace(
        sample,
        image_t=img(sample.image_t),
        image_t1=img(sample.image_t1) if sample.image_t1 is not None else None,
        flow=flow,
        annotations=anns,
    )


def augment(sample: FrameSample, rng: np.random.Generator, max_shift: float = 0.1) -> FrameSample:
    """Random horizontal flip and translate-crop applied identically to every raster."""
    h, w = sample.size
    flip = bool(rng.random() < 0.5)
    dy = int(rng.integers(-int(max_shift * h), int(max_shift * h) + 1))
    dx = int(rng.integers(-int(max_shift * w), int(max_shift * w) + 1))

    def shift(a, fill_edge):
        if flip:
            a = a[:, ::-1]
        pad = [(abs(dy), abs(dy)), (abs(dx), abs(dx))] + [(0, 0)] * (a.ndim - 2)
        p = np.pad(a, pad, mode="edge" if fill_edge else "constant")
        y0, x0 = abs(dy) + dy, abs(dx) + dx
        return np.ascontiguousarray(p[y0 : y0 + h, x0 : x0 + w])

    flow = None
    if sample.flow is not None:
        u = -sample.flow.u if flip else sample.flow.u
        flow = FlowField(shift(u, True), shift(sample.flow.v, True))
    anns = []
    for a in sample.annotations:
        m = shift(a.mask.astype(bool), False)
        if m.sum() < MIN_AUG_AREA:
            continue
        anns.append(replace(a, mask=m, box=mask_box(m)))
    return replace(
        sample,
        image_t=shift(sample.image_t, True),
        image_t1=shift(sample.image_t1, True) if sample.image_t1 is not None else None,
        flow=flow,
        annotations=anns,
    )


class BatchStream:
    """Endless, seeded stream of batches; reshuffles every epoch."""

    def __init__(self, samples: Sequence[FrameSample], batch_size: int, seed: int, augment_rng: Optional[np.random.Generator] = None, max_shift=0.1):
        if not samples:
            raise ValueError("data source is empty")
        self.samples = list(samples)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.augment_rng = augment_rng
        self.max_shift = max_shift
        self._order: List[int] = []

    def next(self) -> List[FrameSample]:
        out = []
        while len(out) < self.batch_size:
            if not self._order:
                self._order = self.rng.permutation(len(self.samples)).tolist()
            out.append(self.samples[self._order.pop(0)])
        if self.augment_rng is not None:
            out = [augment(s, self.augment_rng, self.max_shift) for s in out]
        return out


# --------------------------------------------------------------------------
# training loop


def set_deterministic(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def build_model(model_cfg: ModelConfig, seed: int, dtype=torch.float32) -> MotSegNet:
    torch.manual_seed(derive_seed(seed, "model"))
    model = MotSegNet(model_cfg)
    return model.to(dtype)


def train_step(model, optimizer, samples, head_tag, cfg: TrainConfig, lr: float):
    for g in optimizer.param_groups:
        g["lr"] = lr
    param = next(model.parameters())
    image, motion = make_batch(samples, model.input_mode, model.cfg.max_flow, param.dtype)
    targets = [build_targets(s, head_tag, param.dtype) for s in samples]
    out = model(image, motion, heads=(head_tag,))
    losses = head_losses(out, head_tag, targets, cfg.loss_weights)
    optimizer.zero_grad(set_to_none=True)
    losses["total"].backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.grad is not None], cfg.grad_clip)
    # the inactive head has grad None and is skipped by SGD, momentum included
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def alternate_train(
    model: MotSegNet,
    semantic_data: Sequence[FrameSample],
    motion_data: Sequence[FrameSample],
    cfg: TrainConfig,
    log_path=None,
    callback=None,
):
    """Alternate ``k`` semantic steps with ``k`` motion steps.

    A semantic step updates the shared trunk and the semantic head only; a
    motion step the trunk and the motion head. Returns the model and the list
    of metric records (also appended to ``log_path`` when given).
    """
    cfg.validate()
    size = tuple(cfg.input_size)
    sem = [resize_sample(s, size) for s in semantic_data]
    mot = [resize_sample(s, size) for s in motion_data]
    aug_rng = np.random.default_rng(derive_seed(cfg.seed, "augment")) if cfg.augment else None
    streams = {
        "semantic": BatchStream(sem, cfg.batch_size, derive_seed(cfg.seed, "data/semantic"), aug_rng, cfg.max_shift),
        "motion": BatchStream(mot, cfg.batch_size, derive_seed(cfg.seed, "data/motion"), aug_rng, cfg.max_shift),
    }
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    model.train()
    records = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for it in range(cfg.iterations):
            phase = phase_at(it, cfg.alternation_k)
            lr = lr_at(cfg, it)
            losses = train_step(model, optimizer, streams[phase].next(), phase, cfg, lr)
            if not math.isfinite(losses["total"]):
                raise TrainingDiverged(phase, it, losses["total"])
            rec = {"iteration": it, "phase": phase, "lr": lr, **losses}
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            if cfg.log_every and it % cfg.log_every == 0:
                log.info("it %d %s lr %.2e total %.4f cls %.4f box %.4f mask %.4f", it, phase, lr, losses["total"], losses["cls"], losses["box"], losses["mask"])
            if callback is not None:
                callback(it, model, rec)
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return model, records


# --------------------------------------------------------------------------
# checkpoints: a zip of .npy arrays keyed by parameter path, plus the config


_FIXED_TIME = (1980, 1, 1, 0, 0, 0)


def _write_npz(path, arrays: Dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[key]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{key}.npy", date_time=_FIXED_TIME)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def save_checkpoint(model: MotSegNet, path, config: Optional[dict] = None) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"model": asdict(model.cfg), **(config or {})}
    arrays["__config__"] = np.array(json.dumps(meta, sort_keys=True))
    _write_npz(path, arrays)


def load_checkpoint(path, dtype=torch.float32) -> Tuple[MotSegNet, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__config__"]))
        model = MotSegNet(ModelConfig.from_dict(meta["model"])).to(dtype)
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__config__"}
    model.load_state_dict(state)
    model.eval()
    return model, meta


def import_weights(model: MotSegNet, path, strict: bool = False) -> List[str]:
    """Copy matching arrays from a flat key->array archive; returns the keys loaded."""
    own = model.state_dict()
    loaded = []
    with np.load(path, allow_pickle=False) as data:
        for k in data.files:
            if k in own and tuple(own[k].shape) == data[k].shape:
                own[k].copy_(torch.from_numpy(data[k]))
                loaded.append(k)
            elif strict:
                raise KeyError(f"archive key {k!r} does not match the model")
    return loaded
