"""AP for both heads, pixel-level motion IoU, speed and size benchmarks."""

from __future__ import annotations

import hashlib
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .assembly import instances_to_motion_mask, postprocess
from .features import count_parameters
from .heads import HEAD_TAGS, MotSegNet
from .training import build_targets, make_batch

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class ScoredInstance:
    score: float
    category: int
    box: np.ndarray
    mask: Optional[np.ndarray] = None


@dataclass
class GTInstance:
    category: int
    box: np.ndarray
    mask: Optional[np.ndarray] = None


def iou(a, b, kind: str = "box") -> float:
    """Intersection over union of two boxes (x1, y1, x2, y2) or two binary masks."""
    if kind == "box":
        ax1, ay1, ax2, ay2 = (float(v) for v in a)
        bx1, by1, bx2, by2 = (float(v) for v in b)
        inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
        union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    elif kind == "mask":
        a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
        inter = float(np.logical_and(a, b).sum())
        union = float(np.logical_or(a, b).sum())
    else:
        raise ValueError(f"unknown iou kind {kind!r}")
    return inter / union if union > 0 else 0.0


def _geometry(inst, kind):
    return inst.box if kind == "box" else inst.mask


def _match_category(dets, gts, category, thr, kind):
    """Greedy COCO matching for one category; returns (tp flags in rank order, n_gt)."""
    ranked = sorted(
        ((d.score, img, j, d) for img, ds in enumerate(dets) for j, d in enumerate(ds) if d.category == category),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    gt_by_img = [[g for g in gs if g.category == category] for gs in gts]
    used = [np.zeros(len(g), dtype=bool) for g in gt_by_img]
    n_gt = sum(len(g) for g in gt_by_img)
    tp = np.zeros(len(ranked), dtype=bool)
    for r, (_, img, _, d) in enumerate(ranked):
        best, best_j = thr, -1
        for j, g in enumerate(gt_by_img[img]):
            if used[img][j]:
                continue
            o = iou(_geometry(d, kind), _geometry(g, kind), kind)
            if o >= best and (best_j < 0 or o > best):
                best, best_j = o, j
        if best_j >= 0:
            used[img][best_j] = True
            tp[r] = True
    return tp, n_gt


def precision_at_recall_points(tp: np.ndarray, n_gt: int) -> np.ndarray:
    """101-point interpolated precision from rank-ordered TP flags."""
    if len(tp) == 0:
        return np.zeros(len(RECALL_POINTS))
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    out = np.zeros(len(RECALL_POINTS))
    ok = idx < len(recall)
    out[ok] = envelope[idx[ok]]
    return out


@dataclass
class APResult:
    ap: float
    ap50: float
    ap75: float
    per_category: Dict[int, np.ndarray] = field(default_factory=dict)  # category -> AP per IoU threshold


def compute_ap(detections, ground_truths, kind: str = "box", iou_thresholds=IOU_THRESHOLDS) -> APResult:
    """COCO-style AP (percent) over per-image detection and GT lists.

    Categories without any GT are skipped. AP averages the IoU thresholds,
    AP50/AP75 read single thresholds, and all three average over categories.
    """
    if len(detections) != len(ground_truths):
        raise ValueError("detections and ground truths must cover the same images")
    cats = sorted({g.category for gs in ground_truths for g in gs})
    thresholds = [float(t) for t in iou_thresholds]
    per_cat = {}
    for c in cats:
        vals = []
        for thr in thresholds:
            tp, n_gt = _match_category(detections, ground_truths, c, thr, kind)
            vals.append(precision_at_recall_points(tp, n_gt).mean())
        per_cat[c] = np.array(vals)
    if not per_cat:
        return APResult(float("nan"), float("nan"), float("nan"), {})

    def at(thr):
        i = int(np.argmin(np.abs(np.array(thresholds) - thr)))
        if abs(thresholds[i] - thr) > 1e-9:
            return float("nan")
        return 100.0 * float(np.mean([v[i] for v in per_cat.values()]))

    ap = 100.0 * float(np.mean([v.mean() for v in per_cat.values()]))
    return APResult(ap, at(0.5), at(0.75), per_cat)


# --------------------------------------------------------------------------
# pixel metrics


class MotionIoUAccumulator:
    """Dataset-level confusion counts for the moving / background classes."""

    def __init__(self):
        self.tp = self.fp = self.fn = self.tn = 0

    def update(self, pred, gt) -> None:
        pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        self.tp += int(np.sum(pred & gt))
        self.fp += int(np.sum(pred & ~gt))
        self.fn += int(np.sum(~pred & gt))
        self.tn += int(np.sum(~pred & ~gt))

    def result(self) -> Tuple[float, float, float]:
        u_mov = self.tp + self.fp + self.fn
        u_bg = self.tn + self.fp + self.fn
        moving = self.tp / u_mov if u_mov else 0.0
        background = self.tn / u_bg if u_bg else 0.0
        return moving, background, (moving + background) / 2


def motion_pixel_metrics(pred, gt) -> Tuple[float, float, float]:
    """(moving IoU, background IoU, mIoU) for one mask pair or paired sequences of masks."""
    acc = MotionIoUAccumulator()
    if isinstance(pred, (list, tuple)):
        if len(pred) != len(gt):
            raise ValueError("prediction and ground-truth lists differ in length")
        for p, g in zip(pred, gt):
            acc.update(p, g)
    else:
        acc.update(pred, gt)
    return acc.result()


# --------------------------------------------------------------------------
# reports


def config_fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    heads: Dict[str, Dict[str, Dict[str, float]]]  # head -> {"mask"|"box"} -> {"AP","AP50","AP75"}
    moving_iou: float
    background_iou: float
    miou: float
    params_m: float
    fingerprint: str
    num_images: int
    fps: Optional[float] = None
    time_ms: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def metric_values(self) -> List[float]:
        vals = [v for h in self.heads.values() for kind in h.values() for v in kind.values()]
        vals += [self.moving_iou, self.background_iou, self.miou, self.params_m]
        if self.fps is not None:
            vals += [self.fps, self.time_ms]
        return vals

    def has_nan(self) -> bool:
        return any(isinstance(v, float) and math.isnan(v) for v in self.metric_values())

    def records(self) -> List[str]:
        """Machine-readable ``key=value`` lines."""
        lines = []
        for tag, kinds in self.heads.items():
            for kind, vals in kinds.items():
                for name, v in vals.items():
                    lines.append(f"{tag}.{kind}.{name}={v:.6f}")
        lines += [
            f"motion.moving_iou={self.moving_iou:.6f}",
            f"motion.background_iou={self.background_iou:.6f}",
            f"motion.miou={self.miou:.6f}",
            f"params_m={self.params_m:.6f}",
            f"num_images={self.num_images}",
            f"fingerprint={self.fingerprint}",
        ]
        if self.fps is not None:
            lines += [f"fps={self.fps:.3f}", f"time_ms={self.time_ms:.3f}"]
        return lines

    def table(self) -> str:
        head = f"{'head':<10}{'kind':<6}{'AP':>8}{'AP50':>8}{'AP75':>8}"
        rows = [head, "-" * len(head)]
        for tag, kinds in self.heads.items():
            for kind, v in kinds.items():
                rows.append(f"{tag:<10}{kind:<6}{v['AP']:>8.2f}{v['AP50']:>8.2f}{v['AP75']:>8.2f}")
        rows.append("")
        rows.append(f"moving IoU {self.moving_iou:.2f}  background IoU {self.background_iou:.2f}  mIoU {self.miou:.2f}")
        rows.append(f"params {self.params_m:.3f} M" + (f"  fps {self.fps:.2f}  time {self.time_ms:.2f} ms" if self.fps else ""))
        return "\n".join(rows)


def _instances(dets, masks) -> List[ScoredInstance]:
    return [ScoredInstance(d.score, d.category, d.box, m) for d, m in zip(dets, masks.masks)]


def _gt_instances(sample, head_tag) -> List[GTInstance]:
    t = build_targets(sample, head_tag, torch.float64)
    return [GTInstance(int(l), b.numpy(), m.numpy()) for b, l, m in zip(t.boxes, t.labels, t.masks)]


def predict(model: MotSegNet, sample, score_thresh=0.05, iou_thresh=0.5, top_k=200):
    """Run both heads on one sample; returns {head: (detections, InstanceMaskSet)}."""
    param = next(model.parameters())
    image, motion = make_batch([sample], model.input_mode, model.cfg.max_flow, param.dtype)
    with torch.no_grad():
        out = model(image, motion)
    return {
        tag: postprocess(out.heads[tag], out.anchors, out.prototypes, out.input_size, 0, iou_thresh, score_thresh, top_k)
        for tag in HEAD_TAGS
    }, out


def evaluate(model: MotSegNet, samples, conf_thresh: float = 0.3, config: Optional[dict] = None) -> EvalReport:
    model.eval()
    preds = {tag: [] for tag in HEAD_TAGS}
    gts = {tag: [] for tag in HEAD_TAGS}
    acc = MotionIoUAccumulator()
    for s in samples:
        res, _ = predict(model, s)
        for tag in HEAD_TAGS:
            dets, masks = res[tag]
            preds[tag].append(_instances(dets, masks))
            gts[tag].append(_gt_instances(s, tag))
        dets, masks = res["motion"]
        acc.update(instances_to_motion_mask(dets, masks, s.size, conf_thresh), s.moving_mask())
    heads = {}
    for tag in HEAD_TAGS:
        heads[tag] = {}
        for kind in ("mask", "box"):
            r = compute_ap(preds[tag], gts[tag], kind)
            heads[tag][kind] = {"AP": r.ap, "AP50": r.ap50, "AP75": r.ap75}
    moving, background, miou = acc.result()
    fp = config_fingerprint(config if config is not None else asdict(model.cfg))
    return EvalReport(heads, 100 * moving, 100 * background, 100 * miou, count_params(model), fp, len(samples))


def count_params(model) -> float:
    """Parameter count in millions."""
    return count_parameters(model) / 1e6


def benchmark(model: MotSegNet, samples, warmup: int = 10, runs: int = 100) -> Tuple[float, float]:
    """Median single-image latency including post-processing; flow is taken as given.

    Returns (fps, time_ms).
    """
    model.eval()
    times = []
    for i in range(warmup + runs):
        s = samples[i % len(samples)]
        t0 = time.perf_counter()
        predict(model, s)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt)
    med = statistics.median(times)
    return 1.0 / med, 1000.0 * med
