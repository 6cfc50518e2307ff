"""Attention and segmentation visual exports.

Every export function returns the raw arrays it rendered so tests can assert
on values rather than decoding pixels back out of image files. PNG writing is
optional and deterministic: fixed palette, fixed layout, no timestamps.

The before/after panels are the per-slot logit maps around the kernel
refinement step. Logits (not softmaxed attention) are what the kernel
contracts, so the "after max <= before max" visual check is exact on these
arrays; for display each panel is min-max scaled independently.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import model as md
from .autodiff import Tensor

# 7 saturated colors + background gray; cycled when K exceeds the table
PALETTE = np.array([
    [0.55, 0.55, 0.55],
    [0.91, 0.31, 0.26],
    [0.30, 0.62, 0.92],
    [0.36, 0.78, 0.36],
    [0.95, 0.77, 0.25],
    [0.72, 0.45, 0.89],
    [0.27, 0.80, 0.78],
    [0.93, 0.51, 0.77],
], dtype=np.float32)

ITER_COLORS = np.array([
    [1.0, 0.25, 0.25],
    [1.0, 0.65, 0.2],
    [1.0, 1.0, 0.3],
    [0.5, 1.0, 0.5],
    [0.4, 0.8, 1.0],
], dtype=np.float32)


def _normalize(panel: np.ndarray) -> np.ndarray:
    lo, hi = float(panel.min()), float(panel.max())
    if hi - lo < 1e-12:
        return np.zeros_like(panel, dtype=np.float32)
    return ((panel - lo) / (hi - lo)).astype(np.float32)


def panel_strip(maps: np.ndarray, pad: int = 1) -> np.ndarray:
    """K x H x W -> H x (K*W + separators) grayscale strip, each map min-max
    scaled on its own."""
    K, H, W = maps.shape
    cols = []
    for j in range(K):
        cols.append(_normalize(maps[j]))
        if j < K - 1:
            cols.append(np.ones((H, pad), dtype=np.float32))
    return np.concatenate(cols, axis=1)


def upscale(img: np.ndarray, scale: int) -> np.ndarray:
    """Nearest-neighbor integer upscale of HxW or HxWx3."""
    out = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    return out


def label_colors(labels: np.ndarray) -> np.ndarray:
    """H x W integer labels -> H x W x 3 via the fixed palette (cycled)."""
    return PALETTE[labels % len(PALETTE)]


def draw_points(image: np.ndarray, points: np.ndarray, color) -> np.ndarray:
    """Overlay 3x3 crosses at normalized (x, y) points; returns a copy."""
    out = image.copy()
    H, W = out.shape[:2]
    color = np.asarray(color, dtype=out.dtype)
    for x, y in np.asarray(points, dtype=np.float64):
        col = int(np.clip(round(x * W - 0.5), 0, W - 1))
        row = int(np.clip(round(y * H - 0.5), 0, H - 1))
        for dr, dc in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
            r, c = row + dr, col + dc
            if 0 <= r < H and 0 <= c < W:
                out[r, c] = color
    return out


def _save(path: Path, array: np.ndarray, scale: int) -> None:
    arr = upscale(array, scale)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    u8 = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path)


def export_sample(image: np.ndarray, params: dict, config: md.ModelConfig,
                  noise: np.ndarray, out_dir=None, tag: str = "sample",
                  scale: int = 4) -> dict:
    """One inference pass -> arrays (and PNG files when out_dir is given).

    Returned keys: input (H,W,3), before / after (K,H,W logit maps around the
    kernel step, final iteration), attention (K,H,W final attention),
    points (list of K x 2 arrays, one per recorded iteration), segmentation
    (H,W int labels).
    """
    result = md.slash_forward(Tensor(image), params, config, noise, mode="eval")
    H, W, K = config.H, config.W, config.K
    last = result.fields[-1]
    before = last.M_raw.data.T.reshape(K, H, W).copy()
    after = last.M.data.T.reshape(K, H, W).copy()
    attention = last.attn.data.T.reshape(K, H, W).copy()
    points = [p.data.copy() for p in result.points]
    seg = md.masks_from_model(result, config, source="decoder")

    out = {"input": np.asarray(image, dtype=np.float32),
           "before": before, "after": after, "attention": attention,
           "points": points, "segmentation": seg.labels}

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _save(out_dir / f"{tag}-input.png", out["input"], scale)
        _save(out_dir / f"{tag}-attn-before.png", panel_strip(before), scale)
        _save(out_dir / f"{tag}-attn-after.png", panel_strip(after), scale)
        _save(out_dir / f"{tag}-attn-final.png", panel_strip(attention), scale)
        _save(out_dir / f"{tag}-segmentation.png", label_colors(seg.labels), scale)
        if points:
            overlay = out["input"]
            for t, pts in enumerate(points):
                overlay = draw_points(overlay, pts, ITER_COLORS[t % len(ITER_COLORS)])
            _save(out_dir / f"{tag}-points.png", overlay, scale)
    return out
