"""Middlebury-style color coding of 2D flow fields."""

from __future__ import annotations

import numpy as np

# hue segment lengths: red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red
_SEGMENTS = (15, 6, 4, 11, 13, 6)


def color_wheel() -> np.ndarray:
    """The 55-entry RGB wheel in ``[0, 1]``."""
    ry, yg, gc, cb, bm, mr = _SEGMENTS
    wheel = np.zeros((sum(_SEGMENTS), 3))
    col = 0
    wheel[col:col + ry, 0] = 1.0
    wheel[col:col + ry, 1] = np.arange(ry) / ry
    col += ry
    wheel[col:col + yg, 0] = 1.0 - np.arange(yg) / yg
    wheel[col:col + yg, 1] = 1.0
    col += yg
    wheel[col:col + gc, 1] = 1.0
    wheel[col:col + gc, 2] = np.arange(gc) / gc
    col += gc
    wheel[col:col + cb, 1] = 1.0 - np.arange(cb) / cb
    wheel[col:col + cb, 2] = 1.0
    col += cb
    wheel[col:col + bm, 2] = 1.0
    wheel[col:col + bm, 0] = np.arange(bm) / bm
    col += bm
    wheel[col:col + mr, 2] = 1.0 - np.arange(mr) / mr
    wheel[col:col + mr, 0] = 1.0
    return wheel


def flow_to_color(flow: np.ndarray, max_norm: float | None = None, valid: np.ndarray | None = None) -> np.ndarray:
    """Hue from direction, saturation ``min(|f| / max_norm, 1)``; invalid pixels black.

    ``max_norm`` defaults to the largest valid magnitude.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[-1] != 2:
        raise ValueError(f"flow must be H x W x 2, got {flow.shape}")
    ok = np.all(np.isfinite(flow), axis=-1)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    u = np.where(ok, flow[..., 0], 0.0)
    v = np.where(ok, flow[..., 1], 0.0)
    mag = np.hypot(u, v)
    if max_norm is None:
        max_norm = float(mag.max()) if ok.any() else 0.0
    sat = np.minimum(mag / max_norm, 1.0) if max_norm > 0 else np.zeros_like(mag)
    wheel = color_wheel()
    n = len(wheel)
    angle = np.arctan2(-v, -u) / np.pi  # (-1, 1]
    fk = (angle + 1.0) / 2.0 * (n - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % n
    f = (fk - k0)[..., None]
    base = (1.0 - f) * wheel[k0] + f * wheel[k1]
    rgb = 1.0 - sat[..., None] * (1.0 - base)
    return np.where(ok[..., None], rgb, 0.0)
