"""Turn pixel gaze heatmaps into patch-level prior distributions."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .numerics import InvalidInputError, ShapeError

VARIANTS = ("structured", "uniform", "shuffled", "single_frame")


class DimensionError(ShapeError):
    pass


def _check_heatmap(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
        raise DimensionError(f"heatmap must be a non-empty 2-D grid, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise InvalidInputError("heatmap contains non-finite values")
    if np.any(h < 0):
        raise InvalidInputError("heatmap contains negative values")
    return h


def project_to_patches(h, P: int) -> np.ndarray:
    """Pool a heatmap onto a PxP patch grid and normalize; all-zero maps give the uniform prior.

    Returns a flat vector of length P*P in row-major patch order.
    """
    h = _check_heatmap(h)
    if P < 1:
        raise InvalidInputError(f"patch grid must be >= 1, got {P}")
    H, W = h.shape
    if H % P or W % P:
        raise DimensionError(
            f"heatmap {H}x{W} is not divisible by patch grid {P}; "
            f"resize to a multiple of {P} first"
        )
    sums = h.reshape(P, H // P, P, W // P).sum(axis=(1, 3)).reshape(-1)
    z = sums.sum()
    if z == 0:
        return np.full(P * P, 1.0 / (P * P))
    return sums / z


def project_batch(maps: np.ndarray, P: int) -> np.ndarray:
    """Vectorized projection of (..., H, W) nonnegative maps to (..., P*P)."""
    maps = np.asarray(maps, dtype=np.float64)
    *lead, H, W = maps.shape
    if H % P or W % P:
        raise DimensionError(f"heatmap {H}x{W} is not divisible by patch grid {P}")
    sums = maps.reshape(*lead, P, H // P, P, W // P).sum(axis=(-3, -1)).reshape(*lead, P * P)
    z = sums.sum(axis=-1, keepdims=True)
    uniform = np.full_like(sums, 1.0 / (P * P))
    return np.where(z > 0, sums / np.where(z > 0, z, 1.0), uniform)


def make_weights(T: int, sigma: float) -> np.ndarray:
    """Exponential-decay window weights for offsets -T..T, peaked at 0 and summing to 1."""
    if T < 0:
        raise InvalidInputError(f"window T must be >= 0, got {T}")
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be > 0, got {sigma}")
    w = np.exp(-np.abs(np.arange(-T, T + 1)) / sigma)
    return w / w.sum()


def aggregate_temporal(maps: Sequence, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size % 2 == 0:
        raise InvalidInputError("aggregation weights must have odd length 2T+1")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise InvalidInputError("aggregation weights must be nonnegative and sum to 1")
    if len(maps) != w.size:
        raise ShapeError(f"expected {w.size} heatmaps for window T={w.size // 2}, got {len(maps)}")
    stack = [_check_heatmap(m) for m in maps]
    shape = stack[0].shape
    for m in stack[1:]:
        if m.shape != shape:
            raise DimensionError(f"heatmap shapes differ: {shape} vs {m.shape}")
    out = np.zeros(shape)
    for wi, m in zip(w, stack):
        out += wi * m
    return out


def make_variant(g, kind: str, seed: int = 0, center_frame=None) -> np.ndarray:
    """Derive an ablation prior from a structured prior `g`.

    ``single_frame`` needs the projection of the un-aggregated center frame,
    passed as `center_frame`; the other kinds only look at `g`.
    """
    g = np.asarray(g, dtype=np.float64)
    if kind == "structured":
        return g
    if kind == "uniform":
        return np.full_like(g, 1.0 / g.shape[-1])
    if kind == "shuffled":
        perm = np.random.default_rng(seed).permutation(g.shape[-1])
        return g[..., perm]
    if kind == "single_frame":
        if center_frame is None:
            raise InvalidInputError("single_frame variant needs the center-frame projection")
        return np.asarray(center_frame, dtype=np.float64)
    raise InvalidInputError(f"unknown gaze variant {kind!r}; expected one of {VARIANTS}")


def resize_bilinear(h, height: int, width: int) -> np.ndarray:
    """Bilinear resample with align-corners sampling; used to make dims divisible by the grid."""
    h = _check_heatmap(h)
    H, W = h.shape
    ys = np.linspace(0, H - 1, height) if height > 1 else np.zeros(1)
    xs = np.linspace(0, W - 1, width) if width > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = h[y0][:, x0] * (1 - fx) + h[y0][:, x1] * fx
    bot = h[y1][:, x0] * (1 - fx) + h[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def write_pgm(path, grid, maxval: int = 65535) -> None:
    """ASCII P2 export, values scaled to 0..maxval by the grid maximum."""
    grid = np.asarray(grid, dtype=np.float64)
    top = grid.max() if grid.size else 0.0
    scaled = np.zeros(grid.shape, dtype=np.int64) if top <= 0 else np.rint(grid / top * maxval).astype(np.int64)
    lines = ["P2", f"{grid.shape[1]} {grid.shape[0]}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in scaled]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    """Read an ASCII P2 file back as a float grid in [0, 1] (value / maxval)."""
    with open(path, encoding="ascii") as fh:
        tokens = [t for line in fh for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P2":
        raise InvalidInputError(f"{path}: not an ASCII PGM (P2) file")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array(tokens[4 : 4 + width * height], dtype=np.float64)
    if values.size != width * height:
        raise InvalidInputError(f"{path}: expected {width * height} pixels, found {values.size}")
    return values.reshape(height, width) / maxval
