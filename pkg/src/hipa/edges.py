"""3x3 spatial-derivative filters with replicate padding.

``convolve3x3`` applies the kernel as a correlation (no flip), the usual
image-processing convention; for the Sobel pair this only flips response
signs, never magnitudes.
"""
from __future__ import annotations

import numpy as np

from hipa.grid import as_image

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
for _k in (SOBEL_X, SOBEL_Y, LAPLACIAN):
    _k.flags.writeable = False


def _kernel(kernel) -> np.ndarray:
    k = np.asarray(kernel, dtype=np.float64)
    if k.size != 9:
        raise ValueError("kernel must have 9 weights")
    k = k.reshape(3, 3)
    if not np.all(np.isfinite(k)):
        raise ValueError("kernel weights must be finite")
    return k


def filter3x3(x: np.ndarray, kernel) -> np.ndarray:
    """Batched correlation over the last two axes, replicate padding.

    Accumulates the nine taps in row-major order starting from 0.0, the same
    summation order as a scalar nested loop, so results are bit-reproducible.
    """
    k = _kernel(kernel)
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if h < 3 or w < 3:
        raise ValueError(f"image must be at least 3x3, got {h}x{w}")
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(x, pad, mode="edge")
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            out += k[i, j] * p[..., i:i + h, j:j + w]
    return out


def convolve3x3(image, kernel) -> np.ndarray:
    return filter3x3(as_image(image), kernel)


def sobel_edges(image) -> np.ndarray:
    img = as_image(image)
    gx = filter3x3(img, SOBEL_X)
    gy = filter3x3(img, SOBEL_Y)
    return np.sqrt(gx * gx + gy * gy)


def laplacian_edges(image) -> np.ndarray:
    return np.abs(filter3x3(as_image(image), LAPLACIAN))
