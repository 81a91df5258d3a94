"""Synthetic nested-tumor phantoms, slice filtering, normalisation and BVOL I/O.

Label codes: 0 background, 1 necrosis, 2 edema, 3 non-enhancing tumor,
4 enhancing tumor.  Volumes are (D, H, W, 4) with channels ordered
T1, T1c, T2, FLAIR.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (2262.0, 2.0, 16.0, 7.0, 1.0)

# per-class channel means (T1, T1c, T2, FLAIR); rows are labels 0..4
DEFAULT_MEANS = (
    (1.00, 1.00, 1.00, 1.00),
    (0.70, 0.80, 1.40, 1.20),
    (0.90, 1.00, 1.35, 1.50),
    (0.80, 1.05, 1.25, 1.35),
    (0.85, 1.45, 1.25, 1.35),
)


@dataclass
class PhantomConfig:
    seed: int = 0
    dims: tuple[int, int, int] = (32, 64, 64)
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    tumor_count: int = 1
    means: tuple[tuple[float, ...], ...] = DEFAULT_MEANS
    noise: float = 0.25
    # brain ellipsoid semi-axes as fractions of the volume half-extents
    brain_fraction: float = 0.92

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive extents")
        if len(self.ratios) != 5 or min(self.ratios) <= 0:
            raise ValueError("ratios must be five positive numbers")
        if self.tumor_count < 1:
            raise ValueError("tumor_count must be >= 1")
        if np.shape(self.means) != (5, 4):
            raise ValueError("means must be 5 rows of 4 channel values")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


class BvolFormatError(ValueError):
    pass


def _ellipsoid_radii(volume: float, aspect: np.ndarray) -> np.ndarray:
    # semi-axes proportional to ``aspect`` enclosing ``volume`` voxels
    scale = (volume / (4.0 / 3.0 * math.pi * float(np.prod(aspect)))) ** (1.0 / 3.0)
    return scale * aspect


def _inside(grid, center, radii) -> np.ndarray:
    dz, dy, dx = (g - c for g, c in zip(grid, center))
    return (dz / radii[0]) ** 2 + (dy / radii[1]) ** 2 + (dx / radii[2]) ** 2 <= 1.0


def _tumor_labels(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    d, h, w = cfg.dims
    total = d * h * w
    ratios = np.asarray(cfg.ratios, dtype=np.float64)
    frac = ratios / ratios.sum()
    labels = np.zeros(cfg.dims, dtype=np.uint8)
    grid = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    per_tumor = total / cfg.tumor_count
    for _ in range(cfg.tumor_count):
        aspect = rng.uniform(0.8, 1.25, size=3)
        complete = _ellipsoid_radii(per_tumor * frac[1:].sum(), aspect)
        core = _ellipsoid_radii(per_tumor * (frac[1] + frac[3] + frac[4]), aspect)
        enh = _ellipsoid_radii(per_tumor * frac[4], aspect)
        if np.any(enh < 0.62):
            raise ValueError(f"dims {cfg.dims} too small for the enhancing region")
        margin = np.ceil(complete) + 1
        if np.any(2 * margin >= np.asarray(cfg.dims)):
            raise ValueError(f"dims {cfg.dims} too small to fit the tumor")
        center = np.array([rng.uniform(m, n - 1 - m) for m, n in zip(margin, cfg.dims)])
        # enhancing sits off-centre inside the core but keeps clear of its boundary
        slack = np.maximum(core - enh - 1.0, 0.0)
        enh_center = center + rng.uniform(-0.5, 0.5, size=3) * slack
        in_complete = _inside(grid, center, complete)
        in_core = _inside(grid, center, core)
        in_enh = _inside(grid, enh_center, enh) & in_core
        labels[in_complete] = 2
        shell = in_core & ~in_enh
        # split the core shell between necrosis and non-enhancing by a random plane
        idx = np.flatnonzero(shell)
        if idx.size:
            direction = rng.normal(size=3)
            coords = np.stack([g.reshape(-1)[idx] for g in grid], axis=1) - center
            order = np.argsort(coords @ direction, kind="stable")
            n_necrosis = int(round(idx.size * frac[1] / (frac[1] + frac[3])))
            flat = labels.reshape(-1)
            flat[idx] = 3
            flat[idx[order[:n_necrosis]]] = 1
        labels[in_enh] = 4
    return labels


def generate_phantom(cfg: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(volume, labels)``; identical seeds give bit-identical output."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    labels = _tumor_labels(cfg, rng)
    d, h, w = cfg.dims
    grid = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    half = (np.asarray(cfg.dims) - 1) / 2.0
    brain = _inside(grid, half, np.maximum(half * cfg.brain_fraction + 0.5, 1.0)) | (labels > 0)
    means = np.asarray(cfg.means, dtype=np.float64)
    vol = means[labels] + rng.normal(0.0, cfg.noise, size=labels.shape + (4,))
    # smooth low-frequency tissue variation shared across channels
    field_ = _smooth_field(rng, cfg.dims) * 0.1
    vol += field_[..., None]
    vol[~brain] = 0.0
    vol = np.clip(vol, 1e-3, None) * brain[..., None]
    return vol.astype(np.float32), labels


def _smooth_field(rng: np.random.Generator, dims: Sequence[int]) -> np.ndarray:
    coarse = rng.normal(size=tuple(max(2, n // 8) for n in dims))
    out = coarse
    for axis, n in enumerate(dims):
        src = np.linspace(0, out.shape[axis] - 1, n)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, out.shape[axis] - 1)
        t = (src - lo).reshape([-1 if a == axis else 1 for a in range(out.ndim)])
        out = np.take(out, lo, axis=axis) * (1 - t) + np.take(out, hi, axis=axis) * t
    return out


def class_histogram(labels) -> np.ndarray:
    return np.bincount(np.asarray(labels).reshape(-1), minlength=5)[:5]


@dataclass
class SliceSet:
    slices: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)
    empty: bool = False

    def __len__(self) -> int:
        return len(self.slices)

    def __iter__(self):
        return iter(self.slices)

    def __getitem__(self, i):
        return self.slices[i]


def slice_and_filter(vol: np.ndarray, labels: np.ndarray) -> SliceSet:
    """Axial slices whose label map contains any tumor voxel, in order.

    Image slices come back channel-first, (4, H, W).
    """
    if vol.shape[:3] != labels.shape:
        raise ValueError(f"volume {vol.shape} and labels {labels.shape} disagree")
    keep = np.flatnonzero(labels.reshape(labels.shape[0], -1).any(axis=1))
    out = SliceSet([(np.ascontiguousarray(vol[z].transpose(2, 0, 1)), labels[z]) for z in keep], keep.tolist())
    if not len(out):
        out.empty = True
        logger.warning("no tumor slices found")
    return out


def background_tumor_ratio(labels) -> float:
    h = class_histogram(labels)
    tumor = h[1:].sum()
    return float(h[0] / tumor) if tumor else math.inf


def normalize(vol: np.ndarray) -> np.ndarray:
    """Per-channel z-score over non-zero voxels; zeros stay zero."""
    vol = np.asarray(vol)
    if not np.all(np.isfinite(vol)):
        raise ValueError("volume has non-finite values")
    out = np.zeros_like(vol, dtype=np.float64)
    for c in range(vol.shape[-1]):
        ch = vol[..., c].astype(np.float64)
        mask = ch != 0
        if not mask.any():
            continue
        vals = ch[mask]
        std = vals.std()
        if std <= 1e-12 * max(1.0, abs(vals.mean())):
            continue
        res = np.zeros_like(ch)
        res[mask] = (vals - vals.mean()) / std
        out[..., c] = res
    return out.astype(vol.dtype if vol.dtype.kind == "f" else np.float64)


# BVOL ----------------------------------------------------------------------

BVOL_MAGIC = b"BVOL1\0"
BVOL_HEADER = 26
_BVOL_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def write_bvol(path, array: np.ndarray) -> None:
    """Magic, four little-endian uint32 dims, dtype byte (0 f32, 1 u8), three zero
    pad bytes (26-byte header), then the row-major payload.

    Label volumes (D, H, W) are stored with a trailing extent of 1.
    """
    arr = np.asarray(array)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError("BVOL stores 3-D or 4-D arrays")
    if arr.dtype == np.uint8:
        code = 1
    elif arr.dtype == np.float32:
        code = 0
    else:
        raise ValueError(f"BVOL supports float32 and uint8, not {arr.dtype}")
    header = BVOL_MAGIC + struct.pack("<4IB3x", *arr.shape, code)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype=_BVOL_DTYPES[code]).tobytes())


def read_bvol(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:6] != BVOL_MAGIC:
        raise BvolFormatError(f"{path}: bad magic")
    if len(raw) < BVOL_HEADER:
        raise BvolFormatError(f"{path}: truncated header")
    *dims, code = struct.unpack("<4IB3x", raw[6:BVOL_HEADER])
    if code not in _BVOL_DTYPES:
        raise BvolFormatError(f"{path}: unknown dtype code {code}")
    dt = _BVOL_DTYPES[code]
    n = int(np.prod(dims))
    payload = raw[BVOL_HEADER:]
    if len(payload) != n * dt.itemsize:
        raise BvolFormatError(f"{path}: payload has {len(payload)} bytes, expected {n * dt.itemsize}")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims)
    arr = arr.astype(dt.newbyteorder("="))
    return arr[..., 0] if code == 1 and dims[3] == 1 else arr


# manifests -----------------------------------------------------------------


def write_manifest(path, pairs: Sequence[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{v}\t{l}\n" for v, l in pairs))


def read_manifest(path) -> list[tuple[Path, Path]]:
    base = Path(path).parent
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'volume<TAB>labels'")
        pairs.append(tuple(p if Path(p).is_absolute() else base / p for p in map(Path, parts)))
    return pairs


def load_case(vol_path, label_path) -> tuple[np.ndarray, np.ndarray]:
    return read_bvol(vol_path), read_bvol(label_path)


def generate_set(count: int, seed: int, **overrides) -> list[tuple[np.ndarray, np.ndarray]]:
    """``count`` phantoms with seeds ``seed, seed + 1, ...``."""
    return [generate_phantom(PhantomConfig(seed=seed + i, **overrides)) for i in range(count)]


def slice_pool(cases, normalise: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Stack filtered slices from many cases into (S, 4, H, W) images and (S, H, W) labels."""
    images, labels = [], []
    for vol, lab in cases:
        vol = normalize(vol) if normalise else vol
        for img, lab2 in slice_and_filter(vol, lab):
            images.append(img)
            labels.append(lab2)
    if not images:
        raise ValueError("no tumor slices in any case")
    return np.stack(images).astype(np.float32), np.stack(labels)
