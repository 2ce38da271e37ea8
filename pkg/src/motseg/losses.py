"""Anchor matching and the classification / box / mask losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F

from .assembly import VARIANCES, assemble_mask_logits, box_crop_mask, encode_boxes
from .heads import AnchorSet, HeadOutput, ModelOutput

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.4
NEG_POS_RATIO = 3
MIN_NEGATIVE_FRAME_ANCHORS = 16

NEGATIVE = -1
IGNORE = -2

DEFAULT_LOSS_WEIGHTS = (1.0, 1.5, 6.125)  # (cls, box, mask)


@dataclass
class MatchResult:
    """``assignment[a]`` is a GT index for positives, NEGATIVE or IGNORE."""

    assignment: torch.Tensor
    best_iou: torch.Tensor

    @property
    def positive(self) -> torch.Tensor:
        return self.assignment >= 0

    @property
    def negative(self) -> torch.Tensor:
        return self.assignment == NEGATIVE


@dataclass
class HeadTargets:
    """Ground truth of one image for one head. Labels are 1-based."""

    boxes: torch.Tensor  # (G, 4) corners
    labels: torch.Tensor  # (G,)
    masks: torch.Tensor  # (G, H, W) bool

    @property
    def negative_frame(self) -> bool:
        return self.boxes.shape[0] == 0


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    area_a = (a[:, 2:] - a[:, :2]).prod(-1)
    area_b = (b[:, 2:] - b[:, :2]).prod(-1)
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(union))


def match_anchors(anchors, gt_boxes: torch.Tensor, pos_iou=POSITIVE_IOU, neg_iou=NEGATIVE_IOU) -> MatchResult:
    """Threshold matching plus the best-anchor rule for every GT with non-zero overlap."""
    corners = anchors.corners() if isinstance(anchors, AnchorSet) else anchors
    n = corners.shape[0]
    if gt_boxes.shape[0] == 0:
        return MatchResult(torch.full((n,), NEGATIVE, dtype=torch.long), torch.zeros(n, dtype=corners.dtype))
    iou = box_iou(corners, gt_boxes.to(corners.dtype))
    best_iou, best_gt = iou.max(1)
    assignment = torch.full((n,), IGNORE, dtype=torch.long)
    assignment[best_iou >= pos_iou] = best_gt[best_iou >= pos_iou]
    assignment[best_iou < neg_iou] = NEGATIVE
    gt_best_iou, gt_best_anchor = iou.max(0)
    for j in range(gt_boxes.shape[0]):
        if gt_best_iou[j] > 0:
            assignment[gt_best_anchor[j]] = j
    return MatchResult(assignment, best_iou)


def class_targets(match: MatchResult, labels: torch.Tensor) -> torch.Tensor:
    """Per-anchor class index: label for positives, 0 for negatives, -1 ignored."""
    t = torch.full_like(match.assignment, -1)
    t[match.negative] = 0
    pos = match.positive
    if pos.any():
        t[pos] = labels[match.assignment[pos]].long()
    return t


def classification_loss(logits: torch.Tensor, targets: torch.Tensor, negative_frame: Sequence[bool]) -> torch.Tensor:
    """Softmax CE averaged over positives and mined hard negatives.

    ``logits`` is (B, A, C+1), ``targets`` (B, A) from :func:`class_targets`.
    Ordinary images keep 3 negatives per positive. Images without objects keep
    the N hardest anchors pushed to background, N = max(16, 3 x the batch
    mean positive count), which penalises confident false positives.
    """
    b, a, _ = logits.shape
    ce_all = torch.logsumexp(logits, -1)
    pos_counts = [(targets[i] > 0).sum().item() for i in range(b)]
    n_neg_frame = max(MIN_NEGATIVE_FRAME_ANCHORS, math.ceil(NEG_POS_RATIO * sum(pos_counts) / b))
    total, count = logits.new_zeros(()), 0
    for i in range(b):
        t = targets[i]
        lse = ce_all[i]
        bg_loss = lse - logits[i, :, 0]
        neg = t == 0
        if negative_frame[i]:
            n_neg = min(n_neg_frame, int(neg.sum()))
        else:
            pos = t > 0
            n_pos = pos_counts[i]
            if n_pos:
                total = total + (lse[pos] - logits[i, pos].gather(1, t[pos][:, None]).squeeze(1)).sum()
                count += n_pos
            n_neg = min(NEG_POS_RATIO * n_pos, int(neg.sum()))
        if n_neg:
            cand = torch.nonzero(neg).flatten()
            ranked = torch.argsort(-bg_loss.detach()[cand], stable=True)[:n_neg]
            total = total + bg_loss[cand[ranked]].sum()
            count += n_neg
    return total / max(count, 1)


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def box_loss(regressions: torch.Tensor, targets: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 over the positives' four coordinates, divided by the positive count."""
    n = int(positive.sum())
    if n == 0:
        return regressions.sum() * 0.0
    return smooth_l1(regressions[positive] - targets[positive]).sum() / n


def downsample_masks(masks: torch.Tensor, size) -> torch.Tensor:
    """Area-average (G, H, W) masks to prototype resolution, then threshold at 0.5."""
    if masks.shape[0] == 0:
        return masks.new_zeros((0,) + tuple(size), dtype=torch.bool)
    pooled = F.adaptive_avg_pool2d(masks[:, None].double(), tuple(size))[:, 0]
    return pooled > 0.5


def mask_loss(
    prototypes: torch.Tensor,
    coefficients: torch.Tensor,
    gt_masks: Sequence[torch.Tensor],
    gt_boxes: Sequence[torch.Tensor],
    matches: Sequence[MatchResult],
    input_size,
) -> torch.Tensor:
    """Per positive anchor: BCE inside the matched GT box at prototype resolution,
    divided by the box's pixel count; then averaged over all positives."""
    hp, wp = prototypes.shape[-2:]
    losses = []
    for i, m in enumerate(matches):
        pos = torch.nonzero(m.positive).flatten()
        if pos.numel() == 0:
            continue
        gt_idx = m.assignment[pos]
        logits = assemble_mask_logits(prototypes[i], coefficients[i, pos])
        target = downsample_masks(gt_masks[i], (hp, wp))[gt_idx].to(logits.dtype)
        crop = box_crop_mask(gt_boxes[i].to(logits.dtype)[gt_idx], (hp, wp), input_size).to(logits.dtype)
        bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
        losses.append((bce * crop).flatten(1).sum(1) / crop.flatten(1).sum(1))
    if not losses:
        return coefficients.sum() * 0.0
    return torch.cat(losses).mean()


def head_losses(
    out: ModelOutput,
    head_tag: str,
    targets: Sequence[HeadTargets],
    weights=DEFAULT_LOSS_WEIGHTS,
    variances=VARIANCES,
) -> Dict[str, torch.Tensor]:
    """All three loss terms and their weighted total for one head over a batch."""
    head: HeadOutput = out.heads[head_tag]
    anchors = out.anchors
    dtype = head.boxes.dtype
    matches, cls_t, box_t = [], [], []
    for t in targets:
        m = match_anchors(anchors, t.boxes.to(dtype))
        matches.append(m)
        cls_t.append(class_targets(m, t.labels))
        bt = torch.zeros_like(anchors.boxes, dtype=dtype)
        if m.positive.any():
            pos = m.positive
            bt[pos] = encode_boxes(t.boxes.to(dtype)[m.assignment[pos]], anchors.boxes.to(dtype)[pos], variances)
        box_t.append(bt)
    positive = torch.stack([m.positive for m in matches])
    l_cls = classification_loss(head.logits, torch.stack(cls_t), [t.negative_frame for t in targets])
    l_box = box_loss(head.boxes, torch.stack(box_t), positive)
    l_mask = mask_loss(
        out.prototypes, head.coefficients, [t.masks for t in targets], [t.boxes for t in targets], matches, out.input_size
    )
    w_cls, w_box, w_mask = weights
    total = w_cls * l_cls + w_box * l_box + w_mask * l_mask
    return {"cls": l_cls, "box": l_box, "mask": l_mask, "total": total}
