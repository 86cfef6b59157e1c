"""Coordinate machinery for arbitrary-scale inter-layer prediction.

Pixel (i, j) of an H x W plane sits at the cell center
``(-1 + (2i+1)/H, -1 + (2j+1)/W)``. Correspondences between two planes are
resolved per axis (separable nearest neighbour) with exact integer
arithmetic, so equidistant candidates always resolve to the smaller index.
All flattened outputs are row-major: ``n = i * W + j``.
"""

from __future__ import annotations

import numpy as np


def _check_dims(*dims: tuple[int, int]) -> None:
    for d in dims:
        if len(d) != 2:
            raise ValueError(f"expected (H, W), got {d!r}")
        h, w = d
        if int(h) != h or int(w) != w or h < 1 or w < 1:
            raise ValueError(f"dimensions must be positive integers, got {d!r}")


def axis_coords(n: int) -> np.ndarray:
    """Normalized cell-center coordinates along one axis of length ``n``."""
    return -1.0 + (2.0 * np.arange(n, dtype=np.float64) + 1.0) / n


def normalized_coords(h: int, w: int) -> np.ndarray:
    """H x W x 2 grid of normalized (row, col) coordinates."""
    _check_dims((h, w))
    rows = axis_coords(h)
    cols = axis_coords(w)
    grid = np.empty((h, w, 2), dtype=np.float64)
    grid[..., 0] = rows[:, None]
    grid[..., 1] = cols[None, :]
    return grid


def axis_correspondence(n_prev: int, n_cur: int) -> np.ndarray:
    """Nearest source index for every target index along one axis.

    Target i has continuous source position ``u = ((2i+1) n_prev - n_cur) /
    (2 n_cur)``; the nearest integer with ties going down is
    ``ceil(u - 1/2)``, clipped to the valid range.
    """
    i = np.arange(n_cur, dtype=np.int64)
    num = (2 * i + 1) * n_prev - 2 * n_cur
    den = 2 * n_cur
    idx = -((-num) // den)
    return np.clip(idx, 0, n_prev - 1)


def nearest_correspondence(prev: tuple[int, int], cur: tuple[int, int]) -> np.ndarray:
    """Map every pixel of ``cur`` to its nearest pixel of ``prev``.

    Returns an integer array of shape (H_cur, W_cur, 2) holding (i', j').
    """
    _check_dims(prev, cur)
    ri = axis_correspondence(prev[0], cur[0])
    rj = axis_correspondence(prev[1], cur[1])
    out = np.empty((cur[0], cur[1], 2), dtype=np.int64)
    out[..., 0] = ri[:, None]
    out[..., 1] = rj[None, :]
    return out


def local_grid(prev: tuple[int, int], cur: tuple[int, int]) -> np.ndarray:
    """Relative offset of each target pixel from its source pixel, (H W) x 2."""
    _check_dims(prev, cur)
    ri = axis_correspondence(prev[0], cur[0])
    rj = axis_correspondence(prev[1], cur[1])
    dr = axis_coords(cur[0]) - axis_coords(prev[0])[ri]
    dc = axis_coords(cur[1]) - axis_coords(prev[1])[rj]
    grid = np.empty((cur[0], cur[1], 2), dtype=np.float64)
    grid[..., 0] = dr[:, None]
    grid[..., 1] = dc[None, :]
    return grid.reshape(-1, 2)


def scale_token(prev: tuple[int, int], cur: tuple[int, int]) -> np.ndarray:
    """Constant (H W) x 2 array of ``(2 H_prev / H_cur, 2 W_prev / W_cur)``."""
    _check_dims(prev, cur)
    n = cur[0] * cur[1]
    token = np.array([2.0 * prev[0] / cur[0], 2.0 * prev[1] / cur[1]])
    return np.broadcast_to(token, (n, 2)).copy()
