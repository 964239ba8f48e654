"""Pixel-level hot loops: skeleton drawing and nearest-neighbour resampling.

Every kernel has a numba implementation and a numpy implementation that
produce bit-identical results; ``charanim._accel`` decides which one runs.
"""
import numpy as np

from ._accel import HAVE_NUMBA, jit

SEGMENT = 0.0
DISC = 1.0


def _draw_np(img, prims, colors):
    h, w = img.shape[:2]
    for k in range(prims.shape[0]):
        kind, x0, y0, x1, y1, rad = prims[k]
        lo_x = max(int(np.floor(min(x0, x1) - rad)), 0)
        hi_x = min(int(np.ceil(max(x0, x1) + rad)), w - 1)
        lo_y = max(int(np.floor(min(y0, y1) - rad)), 0)
        hi_y = min(int(np.ceil(max(y0, y1) + rad)), h - 1)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        px = np.arange(lo_x, hi_x + 1, dtype=np.float64)[None, :]
        py = np.arange(lo_y, hi_y + 1, dtype=np.float64)[:, None]
        if kind == DISC:
            dx = px - x0
            dy = py - y0
        else:
            vx = x1 - x0
            vy = y1 - y0
            l2 = vx * vx + vy * vy
            if l2 == 0.0:
                dx = px - x0
                dy = py - y0
            else:
                u = ((px - x0) * vx + (py - y0) * vy) / l2
                u = np.minimum(np.maximum(u, 0.0), 1.0)
                dx = px - (x0 + u * vx)
                dy = py - (y0 + u * vy)
        hit = dx * dx + dy * dy <= rad * rad
        region = img[lo_y:hi_y + 1, lo_x:hi_x + 1]
        region[hit] = colors[k]
    return img


def _draw_py(img, prims, colors):
    h, w = img.shape[0], img.shape[1]
    for k in range(prims.shape[0]):
        kind = prims[k, 0]
        x0 = prims[k, 1]
        y0 = prims[k, 2]
        x1 = prims[k, 3]
        y1 = prims[k, 4]
        rad = prims[k, 5]
        lo_x = max(int(np.floor(min(x0, x1) - rad)), 0)
        hi_x = min(int(np.ceil(max(x0, x1) + rad)), w - 1)
        lo_y = max(int(np.floor(min(y0, y1) - rad)), 0)
        hi_y = min(int(np.ceil(max(y0, y1) + rad)), h - 1)
        vx = x1 - x0
        vy = y1 - y0
        l2 = vx * vx + vy * vy
        r2 = rad * rad
        for r in range(lo_y, hi_y + 1):
            py = float(r)
            for c in range(lo_x, hi_x + 1):
                px = float(c)
                if kind == 1.0 or l2 == 0.0:
                    dx = px - x0
                    dy = py - y0
                else:
                    u = ((px - x0) * vx + (py - y0) * vy) / l2
                    u = min(max(u, 0.0), 1.0)
                    dx = px - (x0 + u * vx)
                    dy = py - (y0 + u * vy)
                if dx * dx + dy * dy <= r2:
                    img[r, c, 0] = colors[k, 0]
                    img[r, c, 1] = colors[k, 1]
                    img[r, c, 2] = colors[k, 2]
    return img


def _resample_np(src, out_h, out_w):
    h, w = src.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return src[rows[:, None], cols[None, :]]


def _resample_py(src, out_h, out_w):
    h, w = src.shape
    out = np.empty((out_h, out_w), dtype=src.dtype)
    for i in range(out_h):
        si = min(int((i + 0.5) * h / out_h), h - 1)
        for j in range(out_w):
            sj = min(int((j + 0.5) * w / out_w), w - 1)
            out[i, j] = src[si, sj]
    return out


_draw_nb = jit(_draw_py)
_resample_nb = jit(_resample_py)


def draw_primitives(img, prims, colors, use_numba=None):
    """Paint segments/discs into ``img`` (H, W, 3) uint8 in order, later on top.

    ``prims`` rows are ``(kind, x0, y0, x1, y1, radius)`` with pixel centres at
    integer coordinates; a pixel is covered when its centre lies within
    ``radius`` of the primitive.
    """
    prims = np.ascontiguousarray(prims, dtype=np.float64).reshape(-1, 6)
    colors = np.ascontiguousarray(colors, dtype=np.uint8).reshape(-1, 3)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba and _draw_nb is not None:
        return _draw_nb(img, prims, colors)
    return _draw_np(img, prims, colors)


def nearest_resample(src, out_h, out_w, use_numba=None):
    """Nearest-neighbour resize of a 2-D array, sampling at cell centres."""
    src = np.ascontiguousarray(src)
    if src.shape == (out_h, out_w):
        return src.copy()
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba and _resample_nb is not None:
        return _resample_nb(src, int(out_h), int(out_w))
    return _resample_np(src, out_h, out_w)
