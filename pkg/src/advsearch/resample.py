"""Float64 image resamplers: nearest, bilinear, bicubic (Keys a=-0.5), box.

All kernels have unit mass, so constant images are preserved, and same-size
nearest resampling is an exact identity. Sampling is center-aligned:
source coordinate u = (i + 0.5) * scale - 0.5.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

RESAMPLERS = ("nearest", "bilinear", "bicubic", "box")


def _cubic_kernel(t):
    # Keys cubic convolution with a = -0.5
    a = -0.5
    t = np.abs(t)
    w = np.where(
        t <= 1.0,
        (a + 2.0) * t**3 - (a + 3.0) * t**2 + 1.0,
        np.where(t < 2.0, a * t**3 - 5.0 * a * t**2 + 8.0 * a * t - 4.0 * a, 0.0),
    )
    return w


def _axis_weights(src, dst, kind):
    """[dst, src] row-stochastic weight matrix for one axis."""
    scale = src / dst
    w = np.zeros((dst, src))
    if kind == "nearest":
        for i in range(dst):
            u = (i + 0.5) * scale - 0.5
            j = int(np.floor(u + 0.5))
            w[i, min(max(j, 0), src - 1)] = 1.0
    elif kind == "bilinear":
        for i in range(dst):
            u = (i + 0.5) * scale - 0.5
            j0 = int(np.floor(u))
            f = u - j0
            for j, wt in ((j0, 1.0 - f), (j0 + 1, f)):
                if wt != 0.0:
                    w[i, min(max(j, 0), src - 1)] += wt
    elif kind == "bicubic":
        for i in range(dst):
            u = (i + 0.5) * scale - 0.5
            j0 = int(np.floor(u))
            taps = np.arange(j0 - 1, j0 + 3)
            wts = _cubic_kernel(u - taps)
            wts = wts / wts.sum()
            for j, wt in zip(taps, wts):
                w[i, min(max(j, 0), src - 1)] += wt
    elif kind == "box":
        for i in range(dst):
            lo, hi = i * scale, (i + 1) * scale
            j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
            for j in range(j0, j1):
                overlap = min(hi, j + 1) - max(lo, j)
                if overlap > 0:
                    w[i, min(max(j, 0), src - 1)] += overlap
        w /= scale
    else:
        raise ConfigError(f"unknown resampler: {kind!r}")
    return w


def resize(image, size, kind):
    """Resize [C, H, W] (or [H, W]) to (size, size) with the named resampler."""
    if kind not in RESAMPLERS:
        raise ConfigError(f"unknown resampler: {kind!r}")
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, h, w = img.shape
    wy = _axis_weights(h, size, kind)
    wx = _axis_weights(w, size, kind)
    out = np.einsum("oh,chw,pw->cop", wy, img, wx, optimize=True)
    return out[0] if squeeze else out
