"""Shared protonet, anchors and the semantic / motion prediction heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import CATEGORIES
from .features import (
    DEFAULT_MAX_FLOW,
    PYRAMID_STRIDES,
    BackboneSpec,
    TwoStreamEncoder,
    build_fpn,
    conv3x3,
    count_parameters,
    pyramid_sizes,
)

HEAD_TAGS = ("semantic", "motion")
ASPECT_RATIOS = (1.0, 0.5, 2.0)


class Protonet(nn.Module):
    """P3 -> k non-negative prototypes at stride 4."""

    def __init__(self, channels: int, k: int = 32, depth: int = 3):
        super().__init__()
        self.k = k
        self.convs = nn.ModuleList(conv3x3(channels, channels) for _ in range(depth))
        self.out = nn.Conv2d(channels, k, 1)

    def forward(self, p3: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        x = p3
        for c in self.convs:
            x = F.relu(c(x))
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return F.relu(self.out(x))


def protonet(module: Protonet, p3: torch.Tensor, input_size: Tuple[int, int]) -> torch.Tensor:
    h, w = input_size
    return module(p3, (math.ceil(h / 4), math.ceil(w / 4)))


class Anchor(NamedTuple):
    cx: float
    cy: float
    width: float
    height: float
    level: int


class AnchorSet:
    """Anchors in (level, row, col, ratio) order; ``boxes`` is (N, 4) as (cx, cy, w, h)."""

    def __init__(self, boxes: torch.Tensor, levels: torch.Tensor, level_counts: List[int]):
        self.boxes = boxes
        self.levels = levels
        self.level_counts = level_counts

    def __len__(self):
        return self.boxes.shape[0]

    def __getitem__(self, i) -> Anchor:
        cx, cy, w, h = (float(v) for v in self.boxes[i])
        return Anchor(cx, cy, w, h, int(self.levels[i]))

    def corners(self) -> torch.Tensor:
        return cxcywh_to_corners(self.boxes)


def cxcywh_to_corners(b: torch.Tensor) -> torch.Tensor:
    return torch.cat([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], dim=-1)


def corners_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    return torch.cat([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], dim=-1)


def generate_anchors(
    sizes: Sequence[Tuple[int, int]],
    scales: Sequence[float],
    strides: Sequence[int] = PYRAMID_STRIDES,
    ratios: Sequence[float] = ASPECT_RATIOS,
    dtype=torch.float32,
) -> AnchorSet:
    """One scale per level, equal-area aspect ratios (ratio = width / height)."""
    boxes, levels, counts = [], [], []
    for lvl, ((h, w), scale, stride) in enumerate(zip(sizes, scales, strides)):
        ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
        cx = (xs.reshape(-1, 1) + 0.5) * stride
        cy = (ys.reshape(-1, 1) + 0.5) * stride
        r = torch.tensor(ratios, dtype=dtype).sqrt()
        aw = (scale * r).expand(h * w, -1)
        ah = (scale / r).expand(h * w, -1)
        b = torch.stack([cx.expand_as(aw), cy.expand_as(aw), aw, ah], dim=-1).reshape(-1, 4)
        boxes.append(b)
        levels.append(torch.full((b.shape[0],), lvl, dtype=torch.long))
        counts.append(b.shape[0])
    return AnchorSet(torch.cat(boxes), torch.cat(levels), counts)


@dataclass
class HeadOutput:
    """Per-anchor outputs concatenated over levels (split with ``level_counts``)."""

    boxes: torch.Tensor  # (B, A, 4)
    logits: torch.Tensor  # (B, A, C + 1)
    coefficients: torch.Tensor  # (B, A, k)
    head_tag: str
    level_counts: List[int]
    prototypes: Optional[torch.Tensor] = None

    def per_level(self):
        return list(
            zip(
                self.boxes.split(self.level_counts, 1),
                self.logits.split(self.level_counts, 1),
                self.coefficients.split(self.level_counts, 1),
            )
        )


class PredictionHead(nn.Module):
    def __init__(self, channels: int, num_classes: int, k: int, num_anchors: int = 3, head_tag: str = "semantic"):
        super().__init__()
        self.head_tag = head_tag
        self.num_classes = num_classes  # including background
        self.k = k
        self.a = num_anchors
        self.tower = conv3x3(channels, channels)
        self.box = conv3x3(channels, num_anchors * 4)
        self.cls = conv3x3(channels, num_anchors * num_classes)
        self.coef = conv3x3(channels, num_anchors * k)

    def forward(self, pyramid: List[torch.Tensor], prototypes: Optional[torch.Tensor] = None) -> HeadOutput:
        boxes, logits, coefs, counts = [], [], [], []
        for p in pyramid:
            b = p.shape[0]
            x = F.relu(self.tower(p))
            boxes.append(self.box(x).permute(0, 2, 3, 1).reshape(b, -1, 4))
            logits.append(self.cls(x).permute(0, 2, 3, 1).reshape(b, -1, self.num_classes))
            coefs.append(torch.tanh(self.coef(x)).permute(0, 2, 3, 1).reshape(b, -1, self.k))
            counts.append(boxes[-1].shape[1])
        return HeadOutput(torch.cat(boxes, 1), torch.cat(logits, 1), torch.cat(coefs, 1), self.head_tag, counts, prototypes)


def head_forward(pyramid, head: PredictionHead, head_tag: str, prototypes=None) -> HeadOutput:
    if head.head_tag != head_tag:
        raise ValueError(f"head built as {head.head_tag!r}, called as {head_tag!r}")
    return head(pyramid, prototypes)


@dataclass
class ModelConfig:
    backbone: str = "tiny_conv"
    backbone_channels: Tuple[int, ...] = (16, 32, 48, 64)
    blocks_per_stage: int = 2
    width_mult: float = 1.0
    input_mode: str = "rgb_flow"
    fusion: str = "concat_project"
    share_streams: bool = False
    fpn_channels: int = 64
    num_prototypes: int = 32
    num_semantic_classes: int = len(CATEGORIES)
    anchor_scale: float = 3.0  # anchor side = anchor_scale * level stride
    aspect_ratios: Tuple[float, ...] = ASPECT_RATIOS
    max_flow: float = DEFAULT_MAX_FLOW

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(self.backbone, tuple(self.backbone_channels), self.blocks_per_stage, self.width_mult)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("backbone_channels", "aspect_ratios"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ModelOutput:
    prototypes: torch.Tensor
    heads: Dict[str, HeadOutput]
    anchors: AnchorSet
    input_size: Tuple[int, int]

    @property
    def semantic(self) -> HeadOutput:
        return self.heads["semantic"]

    @property
    def motion(self) -> HeadOutput:
        return self.heads["motion"]


class MotSegNet(nn.Module):
    """Shared encoder, FPN and protonet with independent semantic and motion heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = TwoStreamEncoder(cfg.backbone_spec(), cfg.input_mode, cfg.fusion, cfg.share_streams)
        self.fpn = build_fpn(self.encoder.out_channels, cfg.fpn_channels)
        self.protonet = Protonet(cfg.fpn_channels, cfg.num_prototypes)
        na = len(cfg.aspect_ratios)
        self.heads = nn.ModuleDict(
            {
                "semantic": PredictionHead(cfg.fpn_channels, cfg.num_semantic_classes + 1, cfg.num_prototypes, na, "semantic"),
                "motion": PredictionHead(cfg.fpn_channels, 2, cfg.num_prototypes, na, "motion"),
            }
        )
        self._anchor_cache: Dict[tuple, AnchorSet] = {}

    @property
    def input_mode(self) -> str:
        return self.cfg.input_mode

    def anchors(self, h: int, w: int, dtype=torch.float32) -> AnchorSet:
        key = (h, w, dtype)
        if key not in self._anchor_cache:
            scales = [self.cfg.anchor_scale * s for s in PYRAMID_STRIDES]
            self._anchor_cache[key] = generate_anchors(pyramid_sizes(h, w), scales, ratios=self.cfg.aspect_ratios, dtype=dtype)
        return self._anchor_cache[key]

    def trunk_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("heads."):
                yield p

    def forward(self, image: torch.Tensor, motion: Optional[torch.Tensor] = None, heads: Sequence[str] = HEAD_TAGS) -> ModelOutput:
        h, w = image.shape[-2:]
        taps = self.encoder(image, motion)
        pyramid = self.fpn(taps)
        protos = protonet(self.protonet, pyramid[0], (h, w))
        outs = {tag: head_forward(pyramid, self.heads[tag], tag, protos) for tag in heads}
        return ModelOutput(protos, outs, self.anchors(h, w, image.dtype), (h, w))

    def num_parameters(self) -> int:
        return count_parameters(self)
