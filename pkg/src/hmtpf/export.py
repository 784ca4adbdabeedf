"""Field export: scattered CSV and nearest-neighbour raster heatmaps (binary PPM)."""

from __future__ import annotations

import numpy as np

RASTER = 256

# Polynomial fit of the viridis ramp, per RGB channel, lowest order first.
_VIRIDIS_POLY = np.array([
    [0.2777273272234177, 0.005407344544966578, 0.3340998053353061],
    [0.1050930431085774, 1.404613529898575, 1.384590162594685],
    [-0.3308618287255563, 0.214847559468213, 0.09509516302823659],
    [-4.634230498983486, -5.799100973351585, -19.33244095627987],
    [6.228269936347081, 14.17993336680509, 56.69055260068105],
    [4.776384997670288, -13.74514537774601, -65.35303263337234],
    [-5.435455855934631, 4.645852612178535, 26.3124352495832],
])


def viridis_table() -> np.ndarray:
    """[256, 3] uint8 colour table, dark purple (0) to yellow (255)."""
    t = np.linspace(0.0, 1.0, 256)[:, None]
    rgb = np.zeros((256, 3))
    for coef in _VIRIDIS_POLY[::-1]:
        rgb = rgb * t + coef
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


COLOR_TABLE = viridis_table()


def rasterize_nearest(points: np.ndarray, values: np.ndarray, size: int = RASTER, chunk: int = 4096) -> np.ndarray:
    """[size, size] grid over the points' bounding box; each pixel centre takes
    the value of its nearest point (lowest index on ties). Row 0 is the top (max y)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"raster export needs 2-d points, got shape {points.shape}")
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    c = (np.arange(size) + 0.5) / size
    gx, gy = np.meshgrid(lo[0] + c * span[0], hi[1] - c * span[1])
    pix = np.stack([gx.ravel(), gy.ravel()], axis=1)
    nearest = np.empty(len(pix), dtype=np.int64)
    sq = (points * points).sum(axis=1)
    for s in range(0, len(pix), chunk):
        p = pix[s:s + chunk]
        d = sq[None, :] - 2.0 * p @ points.T
        nearest[s:s + chunk] = d.argmin(axis=1)
    return np.asarray(values, dtype=np.float64)[nearest].reshape(size, size)


def to_indices(grid: np.ndarray) -> np.ndarray:
    """Linear min-max scaling to 0..255; a constant grid maps to 0."""
    lo, hi = float(grid.min()), float(grid.max())
    if not hi > lo:
        return np.zeros(grid.shape, dtype=np.uint8)
    return np.clip(np.floor((grid - lo) / (hi - lo) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def ppm_bytes(grid: np.ndarray) -> bytes:
    rgb = COLOR_TABLE[to_indices(grid)]
    h, w = grid.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def parse_ppm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError("not a binary 8-bit PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def points_csv(points: np.ndarray, values: np.ndarray, name: str) -> str:
    d = points.shape[1]
    axes = "xyz"[:d] if d <= 3 else [f"x{i}" for i in range(d)]
    lines = [",".join(list(axes) + [name])]
    lines += [",".join(repr(float(v)) for v in (*p, val)) for p, val in zip(points, values)]
    return "\n".join(lines) + "\n"
