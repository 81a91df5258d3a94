"""Binary PGM/PPM rendering of loss curves and label maps."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

# background, necrosis, edema, non-enhancing, enhancing
LABEL_COLORS = np.array(
    [[0, 0, 0], [200, 30, 30], [230, 200, 0], [0, 160, 0], [40, 90, 255]], dtype=np.uint8
)


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    if magic == b"P5":
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)
    raise ValueError(f"{path}: not a binary PGM/PPM file")


def plot_curves(curves: Sequence[np.ndarray], width: int = 480, height: int = 240) -> np.ndarray:
    """Rasterise loss curves onto a grey canvas, one grey level per curve."""
    canvas = np.full((height, width), 255, dtype=np.uint8)
    canvas[[0, -1], :] = 0
    canvas[:, [0, -1]] = 0
    curves = [np.asarray(c, dtype=np.float64) for c in curves if len(c)]
    if not curves:
        return canvas
    lo = min(c.min() for c in curves)
    hi = max(c.max() for c in curves)
    span = hi - lo if hi > lo else 1.0
    for k, c in enumerate(curves):
        level = int(60 * k) % 200
        xs = np.linspace(2, width - 3, num=max(len(c), 2))
        ys = (height - 3) - (c - lo) / span * (height - 5)
        if len(c) == 1:
            ys = np.repeat(ys, 2)
        # dense resampling draws a connected polyline
        dense = np.linspace(0, len(xs) - 1, num=4 * width)
        px = np.interp(dense, np.arange(len(xs)), xs).round().astype(int)
        py = np.interp(dense, np.arange(len(ys)), ys).round().astype(int)
        canvas[np.clip(py, 0, height - 1), np.clip(px, 0, width - 1)] = level
    return canvas


def label_image(labels: np.ndarray, scale: int = 4) -> np.ndarray:
    rgb = LABEL_COLORS[np.asarray(labels, dtype=np.int64)]
    return np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)


def side_by_side(panels: Sequence[np.ndarray], gap: int = 4) -> np.ndarray:
    h = max(p.shape[0] for p in panels)
    parts = []
    for i, p in enumerate(panels):
        pad = np.full((h, p.shape[1], 3), 128, dtype=np.uint8)
        pad[: p.shape[0]] = p
        parts.append(pad)
        if i < len(panels) - 1:
            parts.append(np.full((h, gap, 3), 255, dtype=np.uint8))
    return np.concatenate(parts, axis=1)
