"""From raw head outputs to scored instances and pixel motion masks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .heads import AnchorSet, HeadOutput, cxcywh_to_corners, corners_to_cxcywh

log = logging.getLogger(__name__)

VARIANCES = (0.1, 0.2)
MASK_THRESHOLD = 0.5
CROP_PAD = 1.0
PRE_NMS_TOP = 400


@dataclass
class Detection:
    box: np.ndarray  # (x1, y1, x2, y2) pixels
    score: float
    category: int  # 1-based label; the motion head only emits 1
    coefficients: np.ndarray
    head_tag: str
    index: int = 0  # anchor index, used for deterministic tie-breaking


@dataclass
class InstanceMaskSet:
    masks: np.ndarray  # (n, H, W) bool
    input_size: Tuple[int, int]
    proto_size: Tuple[int, int]


# --------------------------------------------------------------------------
# box coding


def encode_boxes(gt_corners: torch.Tensor, anchors: torch.Tensor, variances=VARIANCES) -> torch.Tensor:
    """SSD regression targets for corner boxes against (cx, cy, w, h) anchors."""
    g = corners_to_cxcywh(gt_corners)
    txy = (g[..., :2] - anchors[..., :2]) / (variances[0] * anchors[..., 2:])
    twh = torch.log(g[..., 2:] / anchors[..., 2:]) / variances[1]
    return torch.cat([txy, twh], dim=-1)


def decode_boxes(
    regressions: torch.Tensor,
    anchors: torch.Tensor,
    variances=VARIANCES,
    image_size: Optional[Tuple[int, int]] = None,
) -> torch.Tensor:
    """Inverse of :func:`encode_boxes`, returning corners clipped to ``image_size`` when given."""
    if regressions.shape[-2] != anchors.shape[-2]:
        raise ValueError(f"{regressions.shape[-2]} regressions for {anchors.shape[-2]} anchors")
    cxcy = anchors[..., :2] + regressions[..., :2] * variances[0] * anchors[..., 2:]
    wh = anchors[..., 2:] * torch.exp(regressions[..., 2:] * variances[1])
    boxes = cxcywh_to_corners(torch.cat([cxcy, wh], dim=-1))
    if image_size is not None:
        h, w = image_size
        boxes = torch.stack(
            [boxes[..., 0].clamp(0, w), boxes[..., 1].clamp(0, h), boxes[..., 2].clamp(0, w), boxes[..., 3].clamp(0, h)],
            dim=-1,
        )
    return boxes


# --------------------------------------------------------------------------
# IoU + NMS


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms_indices(boxes, scores, categories, order_keys, iou_thresh=0.5) -> List[int]:
    """Greedy per-category NMS over arrays; returns kept positions in rank order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    categories = np.asarray(categories)
    order = np.lexsort((np.asarray(order_keys), -scores))
    keep = []
    for cat in np.unique(categories):
        idx = order[categories[order] == cat]
        while idx.size:
            i = idx[0]
            keep.append(i)
            if idx.size == 1:
                break
            ious = box_iou_matrix(boxes[i], boxes[idx[1:]])[0]
            idx = idx[1:][ious <= iou_thresh]
    keep = np.array(keep, dtype=np.int64)
    if keep.size == 0:
        return []
    keep = keep[np.lexsort((np.asarray(order_keys)[keep], -scores[keep]))]
    return keep.tolist()


def nms(detections: Sequence[Detection], iou_thresh=0.5, score_thresh=0.05, top_k=200) -> List[Detection]:
    """Greedy per-category suppression in descending score order.

    A detection is suppressed when its IoU with a kept detection of the same
    category exceeds ``iou_thresh``. Equal scores rank by lower anchor index.
    """
    dets = [d for d in detections if d.score >= score_thresh]
    if not dets:
        return []
    keep = nms_indices(
        [d.box for d in dets], [d.score for d in dets], [d.category for d in dets], [d.index for d in dets], iou_thresh
    )
    return [dets[i] for i in keep[:top_k]]


# --------------------------------------------------------------------------
# masks


def assemble_mask_logits(prototypes: torch.Tensor, coefficients: torch.Tensor) -> torch.Tensor:
    """(k, Hp, Wp) prototypes and (n, k) coefficients -> (n, Hp, Wp) pre-sigmoid masks."""
    k, hp, wp = prototypes.shape
    if coefficients.shape[-1] != k:
        raise ValueError(f"coefficient length {coefficients.shape[-1]} != number of prototypes {k}")
    return (coefficients @ prototypes.reshape(k, -1)).reshape(-1, hp, wp)


def box_crop_mask(boxes: torch.Tensor, out_size: Tuple[int, int], input_size: Tuple[int, int], pad: float = 0.0) -> torch.Tensor:
    """(n, h, w) bool, true where a pixel centre (mapped to input coords) lies in the padded box.

    Boxes too small to contain any pixel centre keep the pixel holding the box centre.
    """
    h, w = out_size
    sy, sx = input_size[0] / h, input_size[1] / w
    xs = (torch.arange(w, dtype=boxes.dtype) + 0.5) * sx
    ys = (torch.arange(h, dtype=boxes.dtype) + 0.5) * sy
    b = boxes.reshape(-1, 4)
    inx = (xs[None] >= b[:, 0:1] - pad) & (xs[None] <= b[:, 2:3] + pad)
    iny = (ys[None] >= b[:, 1:2] - pad) & (ys[None] <= b[:, 3:4] + pad)
    crop = iny[:, :, None] & inx[:, None, :]
    empty = ~crop.flatten(1).any(1)
    if empty.any():
        for i in torch.nonzero(empty).flatten().tolist():
            cx = float((b[i, 0] + b[i, 2]) / 2 / sx)
            cy = float((b[i, 1] + b[i, 3]) / 2 / sy)
            crop[i, min(max(int(cy), 0), h - 1), min(max(int(cx), 0), w - 1)] = True
    return crop


def assemble_soft(prototypes: torch.Tensor, coefficients: torch.Tensor, boxes: torch.Tensor, input_size, pad=CROP_PAD) -> torch.Tensor:
    """Sigmoid masks at prototype resolution, zeroed outside the padded boxes."""
    probs = torch.sigmoid(assemble_mask_logits(prototypes, coefficients))
    crop = box_crop_mask(boxes, prototypes.shape[-2:], input_size, pad)
    return probs * crop.to(probs.dtype)


def assemble_masks(prototypes: torch.Tensor, detections: Sequence[Detection], input_size: Tuple[int, int], pad=CROP_PAD) -> InstanceMaskSet:
    h, w = input_size
    proto_size = tuple(prototypes.shape[-2:])
    if not detections:
        return InstanceMaskSet(np.zeros((0, h, w), dtype=bool), input_size, proto_size)
    with torch.no_grad():
        coefs = torch.as_tensor(np.stack([d.coefficients for d in detections]), dtype=prototypes.dtype)
        boxes = torch.as_tensor(np.stack([d.box for d in detections]), dtype=prototypes.dtype)
        soft = assemble_soft(prototypes, coefs, boxes, input_size, pad)
        up = F.interpolate(soft[:, None], size=(h, w), mode="bilinear", align_corners=False)[:, 0]
        full_crop = box_crop_mask(boxes, (h, w), input_size, pad)
        masks = (up > MASK_THRESHOLD) & full_crop
    return InstanceMaskSet(masks.numpy(), input_size, proto_size)


def instances_to_motion_mask(detections: Sequence[Detection], masks, size: Tuple[int, int], conf_thresh=0.3) -> np.ndarray:
    """Pixel-wise OR of motion instance masks scoring at least ``conf_thresh``."""
    out = np.zeros(size, dtype=bool)
    masks = masks.masks if isinstance(masks, InstanceMaskSet) else masks
    for d, m in zip(detections, masks):
        if d.head_tag != "motion":
            raise ValueError(f"expected motion detections, got {d.head_tag!r}")
        if d.score >= conf_thresh:
            out |= m.astype(bool)
    return out


# --------------------------------------------------------------------------
# full post-processing


def postprocess(
    head: HeadOutput,
    anchors: AnchorSet,
    prototypes: torch.Tensor,
    input_size: Tuple[int, int],
    batch_index: int = 0,
    iou_thresh=0.5,
    score_thresh=0.05,
    top_k=200,
    variances=VARIANCES,
):
    """Decode, filter and assemble one image of one head; returns (detections, InstanceMaskSet)."""
    with torch.no_grad():
        reg = head.boxes[batch_index]
        finite = torch.isfinite(reg).all(-1)
        dropped = int((~finite).sum())
        if dropped:
            log.warning("%s head: dropped %d detections with non-finite regression", head.head_tag, dropped)
        probs = torch.softmax(head.logits[batch_index], -1)[:, 1:]
        scores, cats = probs.max(-1)
        valid = finite & (scores >= score_thresh)
        idx = torch.nonzero(valid).flatten()
        if idx.numel() > PRE_NMS_TOP:
            top = torch.argsort(-scores[idx], stable=True)[:PRE_NMS_TOP]
            idx = idx[top].sort().values
        boxes = decode_boxes(reg[idx], anchors.boxes.to(reg.dtype)[idx], variances, input_size)
        coefs = head.coefficients[batch_index][idx]
        dets = []
        for j, a in enumerate(idx.tolist()):
            bx = boxes[j].double().numpy()
            if bx[2] <= bx[0] or bx[3] <= bx[1]:
                continue
            dets.append(
                Detection(bx, float(scores[a]), int(cats[a]) + 1, coefs[j].double().numpy(), head.head_tag, a)
            )
    dets = nms(dets, iou_thresh, score_thresh, top_k)
    return dets, assemble_masks(prototypes[batch_index], dets, input_size)
