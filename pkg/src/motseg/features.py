"""Backbones, two-stream fusion and the feature pyramid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

INPUT_MODES = ("rgb", "rgb_rgb", "rgb_flow")
FUSION_MODES = ("concat_project", "add")
BACKBONES = ("tiny_conv", "mobilenet_v2_style")
TAP_STRIDES = (8, 16, 32)
# flow magnitude (pixels) mapped to the raster extremes; desk-scale flows are a few pixels per frame
DEFAULT_MAX_FLOW = 4.0
PYRAMID_STRIDES = (8, 16, 32, 64, 128)


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class BackboneSpec:
    name: str = "tiny_conv"
    # tiny_conv: (stem, tap3, tap4, tap5); mobilenet_v2_style: width multiplier applies
    channels: Tuple[int, ...] = (16, 32, 48, 64)
    blocks_per_stage: int = 2
    width_mult: float = 1.0

    @property
    def strides(self) -> Tuple[int, ...]:
        return TAP_STRIDES


def conv3x3(cin, cout, stride=1, bias=True):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=bias)


class TinyConv(nn.Module):
    """Plain strided conv stack, used for tests and desk-scale training."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        stem, *taps = spec.channels
        if len(taps) != 3:
            raise ConfigError(f"tiny_conv needs 4 channel entries (stem + 3 taps), got {spec.channels}")
        self.stem = nn.Sequential(conv3x3(3, stem, 2), nn.ReLU(), conv3x3(stem, stem, 2), nn.ReLU())
        stages, cin = [], stem
        for c in taps:
            layers = [conv3x3(cin, c, 2), nn.ReLU()]
            for _ in range(spec.blocks_per_stage - 1):
                layers += [conv3x3(c, c), nn.ReLU()]
            stages.append(nn.Sequential(*layers))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(taps)

    def forward(self, x):
        x = self.stem(x)
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


def _make_divisible(v, divisor=8):
    return max(divisor, int(v + divisor / 2) // divisor * divisor)


class InvertedResidual(nn.Module):
    def __init__(self, cin, cout, stride, expand):
        super().__init__()
        hidden = cin * expand
        self.use_res = stride == 1 and cin == cout
        layers = []
        if expand != 1:
            layers += [nn.Conv2d(cin, hidden, 1, bias=False), nn.BatchNorm2d(hidden), nn.ReLU6()]
        layers += [
            nn.Conv2d(hidden, hidden, 3, stride, 1, groups=hidden, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU6(),
            nn.Conv2d(hidden, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        ]
        self.conv = nn.Sequential(*layers)

    def forward(self, x):
        out = self.conv(x)
        return x + out if self.use_res else out


class MobileNetV2Style(nn.Module):
    # (expand, channels, repeats, stride); taps after the 3rd, 5th and 7th group
    SETTINGS = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
    TAP_AFTER = (2, 4, 6)

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        wm = spec.width_mult
        cin = _make_divisible(32 * wm)
        self.stem = nn.Sequential(nn.Conv2d(3, cin, 3, 2, 1, bias=False), nn.BatchNorm2d(cin), nn.ReLU6())
        groups, taps = [], []
        for t, c, n, s in self.SETTINGS:
            cout = _make_divisible(c * wm)
            blocks = []
            for i in range(n):
                blocks.append(InvertedResidual(cin, cout, s if i == 0 else 1, t))
                cin = cout
            groups.append(nn.Sequential(*blocks))
            taps.append(cout)
        self.groups = nn.ModuleList(groups)
        self.out_channels = tuple(taps[i] for i in self.TAP_AFTER)

    def forward(self, x):
        x = self.stem(x)
        taps = []
        for i, g in enumerate(self.groups):
            x = g(x)
            if i in self.TAP_AFTER:
                taps.append(x)
        return taps


def build_backbone(spec: BackboneSpec) -> nn.Module:
    if spec.name == "tiny_conv":
        return TinyConv(spec)
    if spec.name == "mobilenet_v2_style":
        return MobileNetV2Style(spec)
    raise ConfigError(f"unknown backbone {spec.name!r}; accepted: {', '.join(BACKBONES)}")


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def normalize_raster(x: torch.Tensor) -> torch.Tensor:
    """Map a 0..255 raster to roughly unit range."""
    return (x - 127.5) / 64.0


def flow_to_raster(flow: torch.Tensor, max_flow: float = DEFAULT_MAX_FLOW) -> torch.Tensor:
    """(B, 2, H, W) flow -> (B, 3, H, W) raster of (u, v, magnitude) on the 0..255 scale."""
    u, v = flow[:, 0:1], flow[:, 1:2]
    mag = torch.sqrt(u * u + v * v)
    un = torch.clamp(u / max_flow, -1.0, 1.0)
    vn = torch.clamp(v / max_flow, -1.0, 1.0)
    mn = torch.clamp(mag / max_flow, 0.0, 1.0)
    return torch.cat([(un + 1) * 127.5, (vn + 1) * 127.5, mn * 255.0], dim=1)


class Fusion(nn.Module):
    def __init__(self, mode: str, channels: Sequence[int]):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion {mode!r}; accepted: {', '.join(FUSION_MODES)}")
        self.mode = mode
        if mode == "concat_project":
            self.proj = nn.ModuleList(nn.Conv2d(2 * c, c, 1) for c in channels)

    def forward(self, app: List[torch.Tensor], mot: List[torch.Tensor]) -> List[torch.Tensor]:
        if self.mode == "add":
            return [a + m for a, m in zip(app, mot)]
        return [p(torch.cat([a, m], dim=1)) for p, a, m in zip(self.proj, app, mot)]


class TwoStreamEncoder(nn.Module):
    """Appearance stream plus an optional motion stream fused tap-wise.

    ``rgb`` runs one stream. ``rgb_rgb`` feeds frame t+1 to the motion stream,
    ``rgb_flow`` feeds the flow raster. Inputs are 0..255 rasters.
    """

    def __init__(self, spec: BackboneSpec, input_mode="rgb_flow", fusion="concat_project", share_streams=False):
        super().__init__()
        if input_mode not in INPUT_MODES:
            raise ConfigError(f"unknown input_mode {input_mode!r}; accepted: {', '.join(INPUT_MODES)}")
        self.input_mode = input_mode
        self.share_streams = share_streams
        self.appearance = build_backbone(spec)
        self.out_channels = self.appearance.out_channels
        if input_mode != "rgb":
            if not share_streams:
                self.motion = build_backbone(spec)
            self.fusion = Fusion(fusion, self.out_channels)

    def motion_stream(self) -> nn.Module:
        return self.appearance if self.share_streams else self.motion

    def forward(self, image: torch.Tensor, motion: Optional[torch.Tensor] = None) -> List[torch.Tensor]:
        taps = self.appearance(normalize_raster(image))
        if self.input_mode == "rgb":
            return taps
        if motion is None:
            raise InputError(f"input_mode {self.input_mode} requires a motion raster")
        if motion.shape[-2:] != image.shape[-2:]:
            raise InputError(f"motion raster size {tuple(motion.shape[-2:])} != image size {tuple(image.shape[-2:])}")
        return self.fusion(taps, self.motion_stream()(normalize_raster(motion)))


def motion_raster(sample, input_mode: str, max_flow: float = DEFAULT_MAX_FLOW) -> Optional[np.ndarray]:
    """(3, H, W) float32 motion-stream raster for one FrameSample, or None for ``rgb``."""
    if input_mode == "rgb":
        return None
    if input_mode == "rgb_rgb":
        if sample.image_t1 is None:
            raise InputError(f"{sample.key}: rgb_rgb needs image_t1")
        return sample.image_t1.transpose(2, 0, 1).astype(np.float32)
    if input_mode == "rgb_flow":
        if sample.flow is None:
            raise InputError(f"{sample.key}: rgb_flow needs a flow field")
        flow = torch.from_numpy(sample.flow.stack().transpose(2, 0, 1).copy())[None]
        return flow_to_raster(flow, max_flow)[0].numpy()
    raise ConfigError(f"unknown input_mode {input_mode!r}; accepted: {', '.join(INPUT_MODES)}")


def forward_streams(encoder: TwoStreamEncoder, sample, max_flow: float = DEFAULT_MAX_FLOW) -> List[torch.Tensor]:
    """Encode one FrameSample with the inputs its mode requires."""
    param = next(encoder.parameters())
    image = torch.from_numpy(sample.image_t.transpose(2, 0, 1).astype(np.float32))[None].to(param.dtype)
    mot = motion_raster(sample, encoder.input_mode, max_flow)
    if mot is not None:
        mot = torch.from_numpy(mot)[None].to(param.dtype)
    return encoder(image, mot)


class FPN(nn.Module):
    """Lateral 1x1, top-down nearest upsampling, 3x3 smoothing; P6/P7 by strided convs."""

    def __init__(self, in_channels: Sequence[int], channels: int = 64):
        super().__init__()
        self.in_channels = tuple(in_channels)
        self.channels = channels
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.smooth = nn.ModuleList(conv3x3(channels, channels) for _ in in_channels)
        self.down = nn.ModuleList([conv3x3(channels, channels, 2), conv3x3(channels, channels, 2)])

    def forward(self, taps: List[torch.Tensor]) -> List[torch.Tensor]:
        if len(taps) != 3:
            raise ValueError(f"FPN expects 3 taps, got {len(taps)}")
        for t, c in zip(taps, self.in_channels):
            if t.shape[1] != c:
                raise ValueError(f"tap has {t.shape[1]} channels, FPN built for {self.in_channels}")
        lat = [l(t) for l, t in zip(self.lateral, taps)]
        x = lat[2]
        merged = [x]
        for i in (1, 0):
            x = lat[i] + F.interpolate(x, size=lat[i].shape[-2:], mode="nearest")
            merged.insert(0, x)
        out = [F.relu(s(m)) for s, m in zip(self.smooth, merged)]
        p6 = self.down[0](out[-1])
        p7 = self.down[1](p6)
        return out + [p6, p7]


def build_fpn(in_channels: Sequence[int], channels: int = 64) -> FPN:
    return FPN(in_channels, channels)


def pyramid_sizes(h: int, w: int) -> List[Tuple[int, int]]:
    return [(math.ceil(h / s), math.ceil(w / s)) for s in PYRAMID_STRIDES]
