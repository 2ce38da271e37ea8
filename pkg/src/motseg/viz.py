"""Prototype and coefficient grids plus instance overlays, written as PNG."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch
from PIL import Image

from .assembly import Detection
from .evaluation import predict
from .heads import HEAD_TAGS

log = logging.getLogger(__name__)

GRID_COLS = 6
GAP = 2
COEF_CELL = 24
PALETTE = np.array(
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]],
    dtype=np.uint8,
)
MOTION_COLOR = np.array([255, 40, 40], dtype=np.uint8)


def grid_shape(k: int, cols: int = GRID_COLS):
    return max(1, math.ceil(k / cols)), cols


def _tile(cells: List[np.ndarray], cell_hw, cols: int, blank: int) -> np.ndarray:
    rows, cols = grid_shape(len(cells), cols)
    h, w = cell_hw
    out = np.full((rows * h + (rows - 1) * GAP, cols * w + (cols - 1) * GAP), 255, dtype=np.uint8)
    for i in range(rows * cols):
        r, c = divmod(i, cols)
        y, x = r * (h + GAP), c * (w + GAP)
        out[y : y + h, x : x + w] = cells[i] if i < len(cells) else blank
    return out


def normalize_prototype(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    lo, hi = p.min(), p.max()
    if hi <= lo:
        return np.zeros(p.shape, dtype=np.uint8)
    return np.floor((p - lo) / (hi - lo) * 255 + 0.5).astype(np.uint8)


def prototype_grid(prototypes, cols: int = GRID_COLS) -> np.ndarray:
    """(k, H, W) prototypes -> one grey image, ceil(k/cols) x cols cells, each min-max scaled."""
    protos = prototypes.detach().cpu().numpy() if isinstance(prototypes, torch.Tensor) else np.asarray(prototypes)
    cells = [normalize_prototype(p) for p in protos]
    return _tile(cells, protos.shape[1:], cols, blank=0)


def coefficient_grid(coefficients, cols: int = GRID_COLS, cell: int = COEF_CELL) -> np.ndarray:
    """tanh coefficients in [-1, 1] as grey cells: -1 black, 0 mid-grey (128), +1 white.

    Cells past the last coefficient are drawn at the neutral level.
    """
    c = np.clip(np.asarray(coefficients, dtype=np.float64), -1, 1)
    levels = np.floor((c + 1) / 2 * 255 + 0.5).astype(np.uint8)
    cells = [np.full((cell, cell), v, dtype=np.uint8) for v in levels]
    return _tile(cells, (cell, cell), cols, blank=128)


def overlay(image: np.ndarray, masks: np.ndarray, colors: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    out = image.astype(np.float64).copy()
    for m, col in zip(masks, colors):
        m = m.astype(bool)
        out[m] = (1 - alpha) * out[m] + alpha * col.astype(np.float64)
    return np.floor(out + 0.5).clip(0, 255).astype(np.uint8)


def _colors(dets: List[Detection], head_tag: str) -> np.ndarray:
    if head_tag == "motion":
        return np.tile(MOTION_COLOR, (len(dets), 1))
    return np.stack([PALETTE[(d.category - 1) % len(PALETTE)] for d in dets]) if dets else np.zeros((0, 3), np.uint8)


def save_png(array: np.ndarray, path) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def render_visualization(model, sample, out_dir, conf_thresh: float = 0.3) -> Dict[str, Path]:
    """Write the prototype grid and, per head with detections, the top detection's
    coefficient grid and an overlay of all detections scoring >= ``conf_thresh``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results, out = predict(model, sample)
    written = {}
    written["prototypes"] = out_dir / "prototypes.png"
    save_png(prototype_grid(out.prototypes[0]), written["prototypes"])
    if not any(results[t][0] for t in HEAD_TAGS):
        log.warning("no detections in %s; wrote the prototype grid only", sample.key)
        return written
    for tag in HEAD_TAGS:
        dets, masks = results[tag]
        if not dets:
            log.warning("%s head: no detections in %s", tag, sample.key)
            continue
        written[f"coefficients_{tag}"] = out_dir / f"coefficients_{tag}.png"
        save_png(coefficient_grid(dets[0].coefficients), written[f"coefficients_{tag}"])
        keep = [i for i, d in enumerate(dets) if d.score >= conf_thresh]
        kept = [dets[i] for i in keep]
        img = overlay(sample.image_t, masks.masks[keep], _colors(kept, tag))
        written[f"overlay_{tag}"] = out_dir / f"overlay_{tag}.png"
        save_png(img, written[f"overlay_{tag}"])
    return written
