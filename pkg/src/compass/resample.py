"""Separable bicubic resampling with edge replication.

Sampling positions follow the half-pixel (align_corners=False) convention
and the kernel is not widened when downscaling, which reproduces
``torch.nn.functional.interpolate(mode="bicubic")`` for ``a = -0.75``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

DEFAULT_A = -0.75


def cubic_kernel(x: np.ndarray, a: float = DEFAULT_A) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = ((a + 2) * x[near] - (a + 3)) * x[near] ** 2 + 1
    out[far] = ((x[far] - 5) * x[far] + 8) * x[far] * a - 4 * a
    return out


@lru_cache(maxsize=256)
def _weights(n_in: int, n_out: int, a: float) -> np.ndarray:
    scale = n_in / n_out
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = int(np.floor(src))
        t = src - base
        taps = cubic_kernel(np.array([t + 1, t, 1 - t, 2 - t]), a)
        for k, wk in zip(range(-1, 3), taps):
            m[i, min(max(base + k, 0), n_in - 1)] += wk
    m.setflags(write=False)
    return m


def resample_matrix(n_in: int, n_out: int, a: float = DEFAULT_A) -> np.ndarray:
    """(n_out, n_in) matrix applying 1-D bicubic resampling."""
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be positive")
    return _weights(int(n_in), int(n_out), float(a))


def bicubic_resize(img: np.ndarray, target: tuple[int, int], a: float = DEFAULT_A) -> np.ndarray:
    """Resize an H x W x C float image."""
    h, w = img.shape[:2]
    th, tw = int(target[0]), int(target[1])
    if (h, w) == (th, tw):
        return np.array(img, dtype=np.float64, copy=True)
    wh = resample_matrix(h, th, a)
    ww = resample_matrix(w, tw, a)
    tmp = np.tensordot(wh, np.asarray(img, dtype=np.float64), axes=(1, 0))
    return np.tensordot(tmp, ww, axes=(1, 1)).transpose(0, 2, 1)


def bicubic_resize_tensor(x: torch.Tensor, target: tuple[int, int], a: float = DEFAULT_A) -> torch.Tensor:
    """Differentiable resize of a (..., H, W) tensor."""
    h, w = x.shape[-2:]
    th, tw = int(target[0]), int(target[1])
    if (h, w) == (th, tw):
        return x
    wh = torch.tensor(resample_matrix(h, th, a), dtype=x.dtype)
    ww = torch.tensor(resample_matrix(w, tw, a), dtype=x.dtype)
    return torch.matmul(torch.matmul(wh, x), ww.T)
